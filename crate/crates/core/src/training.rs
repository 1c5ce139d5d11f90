//! Two-stage training: the task adapter first, then one knowledge adapter per
//! document on top of the frozen task adapter.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    overlap_penalty, overlap_penalty_grad, KnowledgeAdapter, LoraLayer, TaskAdapter, TaskType,
    Variant,
};
use crate::error::{OsdError, Result};
use crate::linalg::{null_space_basis, Matrix, NullSpaceBasis};
use crate::model::{backward_lora, backward_task, eval_loss, BaseWeights, Batch, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate towards zero over all steps.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    /// Overlap penalty weight; used by the soft variant only.
    pub lambda: f64,
    pub variant: Variant,
    /// Singular-value threshold; used by the hard variant only.
    pub tau: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    /// Knowledge-stage defaults: lr 3e-4, one epoch, λ = 0.1, τ = 1e-5.
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 1,
            batch_size: 4,
            rank: 4,
            lambda: 0.1,
            variant: Variant::Soft,
            tau: 1e-5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Task-stage defaults: lr 1e-4, one epoch.
    pub fn task_default() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    // negated comparisons so that NaN fails validation
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.rank == 0
        {
            return Err(OsdError::Argument(
                "learning_rate, epochs, batch_size and rank must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) {
            return Err(OsdError::Argument("lambda must be ≥ 0 and tau > 0".into()));
        }
        Ok(())
    }
}

/// Stable sub-seed for a labelled stream, e.g. `derive_seed(7, &["doc0003"])`.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update([0u8]);
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Encoded examples of a single task type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub task_type: TaskType,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective per optimizer step (`L_ce + λ·L_ortho` for soft).
    pub losses: Vec<f64>,
    pub ce_losses: Vec<f64>,
    /// Overlap with the task adapter before each step; empty for the task
    /// stage.
    pub ortho_losses: Vec<f64>,
    pub final_ce: f64,
    pub final_ortho: Option<f64>,
    pub wall_time_secs: f64,
    pub steps: usize,
}

/// Adam moments (unused for SGD), the step counter and the current
/// learning-rate multiplier.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    pub lr_scale: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            t: 0,
            lr_scale: 1.0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl OptimizerState {
    /// Sets the multiplier for step `step` of `total` under `schedule`.
    pub fn schedule(&mut self, schedule: LrSchedule, step: usize, total: usize) {
        self.lr_scale = match schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / total.max(1) as f64,
        };
    }
}

/// One update of `params` from `grads`. Rejects non-finite gradients before
/// touching any parameter.
pub fn optimizer_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(OsdError::Structural(format!(
            "{} params, {} grads, {} names",
            params.len(),
            grads.len(),
            names.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(OsdError::shape(
                "optimizer_step",
                format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(OsdError::NonFinite { site: name.clone() });
        }
    }
    let lr = config.learning_rate * state.lr_scale;
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.axpy(-lr, g)?;
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = params
                    .iter()
                    .map(|p| Matrix::zeros(p.rows(), p.cols()))
                    .collect();
                state.v = state.m.clone();
            }
            state.t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                let it = p
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
                for ((pi, gi), (mi, vi)) in it {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *pi -= lr * m_hat / (v_hat.sqrt() + config.eps);
                }
            }
        }
    }
    Ok(())
}

fn total_steps(n: usize, config: &TrainConfig) -> usize {
    config.epochs * n.div_ceil(config.batch_size)
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn select(set: &TrainingSet, idx: &[usize]) -> Batch {
    Batch::new(idx.iter().map(|&i| set.examples[i].clone()).collect())
}

/// Task adapter trained on a task-level corpus by masked CE alone.
pub fn train_task(
    corpus: &TrainingSet,
    base: &BaseWeights,
    config: &TrainConfig,
) -> Result<(TaskAdapter, TrainReport)> {
    config.validate()?;
    if corpus.examples.is_empty() {
        return Err(OsdError::EmptyCorpus);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes = base.adapted_sites();
    let layers: Vec<LoraLayer> = shapes
        .iter()
        .map(|s| LoraLayer::init(*s, config.rank, &mut rng))
        .collect();
    let mut task = TaskAdapter::new(corpus.task_type, layers)?;
    let names = param_names(&task.sites());
    let mut state = OptimizerState::default();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        for idx in batches(corpus.examples.len(), config.batch_size, &mut rng) {
            state.schedule(
                config.schedule,
                losses.len(),
                total_steps(corpus.examples.len(), config),
            );
            let batch = select(corpus, &idx);
            let grads = backward_task(base, &task, &batch)?;
            losses.push(grads.loss);
            let mut params: Vec<Matrix> = task
                .layers
                .iter()
                .flat_map(|l| [l.a.clone(), l.b.clone()])
                .collect();
            let g: Vec<Matrix> = grads.sites.into_iter().flat_map(|s| [s.a, s.b]).collect();
            optimizer_step(&mut params, &g, &names, &mut state, config)?;
            let mut it = params.into_iter();
            for l in &mut task.layers {
                l.a = it.next().expect("one A per site");
                l.b = it.next().expect("one B per site");
            }
        }
    }
    let final_ce = eval_loss(
        base,
        Some(&task),
        None,
        &Batch::new(corpus.examples.clone()),
    )?;
    let report = TrainReport {
        steps: losses.len(),
        ce_losses: losses.clone(),
        losses,
        ortho_losses: Vec::new(),
        final_ce,
        final_ortho: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((task, report))
}

/// One null-space basis per adapted site of `task`.
pub fn precompute_bases(task: &TaskAdapter, tau: f64) -> Result<Vec<Arc<NullSpaceBasis>>> {
    task.layers
        .iter()
        .map(|l| null_space_basis(&l.a, tau).map(Arc::new))
        .collect()
}

fn param_names(sites: &[crate::adapters::SiteId]) -> Vec<String> {
    sites
        .iter()
        .flat_map(|s| [format!("{s}.A"), format!("{s}.B")])
        .collect()
}

/// Knowledge adapter for one document.
///
/// * `entangled`: the task adapter is not loaded and no penalty applies;
///   `task` is optional and only used to log the overlap.
/// * `soft`: CE on top of the frozen task adapter plus `λ·Σ‖A_T A_Kᵀ‖_F²`.
/// * `hard`: trains `Â` with `A = Â·V_⊥ᵀ`; `bases` are computed from `task`
///   when not supplied.
pub fn train_knowledge(
    doc_id: &str,
    doc: &TrainingSet,
    task: Option<&TaskAdapter>,
    bases: Option<&[Arc<NullSpaceBasis>]>,
    base: &BaseWeights,
    config: &TrainConfig,
) -> Result<(KnowledgeAdapter, TrainReport)> {
    config.validate()?;
    if doc.examples.is_empty() {
        return Err(OsdError::EmptyCorpus);
    }
    let start = Instant::now();
    let variant = config.variant;
    let required_task = match (variant, task) {
        (Variant::Entangled, _) => None,
        (_, Some(t)) => Some(t),
        (_, None) => return Err(OsdError::MissingAdapter(format!("task/{}", doc.task_type))),
    };
    let owned_bases;
    let bases = match (variant, bases) {
        (Variant::Hard, None) => {
            owned_bases = precompute_bases(
                required_task.expect("hard needs the task adapter"),
                config.tau,
            )?;
            Some(owned_bases.as_slice())
        }
        (Variant::Hard, Some(b)) => Some(b),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes = base.adapted_sites();
    let mut know = KnowledgeAdapter::init(doc_id, variant, &shapes, config.rank, bases, &mut rng)?;
    let loaded_task = required_task;
    let names = param_names(&know.sites());
    let mut state = OptimizerState::default();
    let (mut losses, mut ce_losses, mut ortho_losses) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        for idx in batches(doc.examples.len(), config.batch_size, &mut rng) {
            state.schedule(
                config.schedule,
                losses.len(),
                total_steps(doc.examples.len(), config),
            );
            let batch = select(doc, &idx);
            let grads = backward_lora(base, loaded_task, &know, &batch)?;
            let ortho = task.map(|t| overlap_penalty(t, &know)).transpose()?;
            let mut g: Vec<Matrix> = Vec::with_capacity(names.len());
            let mut total = grads.loss;
            let penalized = loaded_task.filter(|_| variant == Variant::Soft && config.lambda > 0.0);
            if let (Some(t), Some(o)) = (penalized, ortho) {
                total += config.lambda * o;
                let pen = overlap_penalty_grad(t, &know)?;
                for (s, p) in grads.sites.into_iter().zip(pen) {
                    let mut da = s.a;
                    da.axpy(config.lambda, &p)?;
                    g.push(da);
                    g.push(s.b);
                }
            } else {
                g.extend(grads.sites.into_iter().flat_map(|s| [s.a, s.b]));
            }
            losses.push(total);
            ce_losses.push(grads.loss);
            ortho_losses.extend(ortho);

            let mut params: Vec<Matrix> = Vec::with_capacity(names.len());
            for (i, l) in know.layers().iter().enumerate() {
                match know.hard_sites() {
                    Some(h) => params.push(h[i].a_hat.clone()),
                    None => params.push(l.a.clone()),
                }
                params.push(l.b.clone());
            }
            optimizer_step(&mut params, &g, &names, &mut state, config)?;
            let mut it = params.into_iter();
            for i in 0..shapes.len() {
                let a = it.next().expect("one A per site");
                let b = it.next().expect("one B per site");
                if variant == Variant::Hard {
                    know.set_a_hat(i, a)?;
                } else {
                    know.set_a(i, a)?;
                }
                know.set_b(i, b)?;
            }
        }
    }
    let final_ce = eval_loss(
        base,
        loaded_task,
        Some(&know),
        &Batch::new(doc.examples.clone()),
    )?;
    let final_ortho = task.map(|t| overlap_penalty(t, &know)).transpose()?;
    let report = TrainReport {
        steps: losses.len(),
        losses,
        ce_losses,
        ortho_losses,
        final_ce,
        final_ortho,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((know, report))
}
