//! LoRA adapter algebra.
//!
//! Every adapted weight `W ∈ ℝ^{d_out×d_in}` receives `ΔW = B·A` with
//! `A ∈ ℝ^{r×d_in}` and `B ∈ ℝ^{d_out×r}`; there is no scaling factor.
//! Orthogonality between task and knowledge adapters is always stated on
//! the down-projection `A`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OsdError, Result};
use crate::linalg::{cross_overlap, cross_overlap_trace, matmul, Matrix, NullSpaceBasis};

/// Standard deviation of the Gaussian used for freshly initialised `A`.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    MlpUp,
    MlpDown,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::MlpUp => "mlp_up",
            SiteKind::MlpDown => "mlp_down",
        }
    }
}

/// An adapted weight site. Orders layer-major, `mlp_up` before `mlp_down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.as_str())
    }
}

impl FromStr for SiteId {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || OsdError::Argument(format!("malformed site id {s:?}"));
        let (layer, kind) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer
            .strip_prefix("layer")
            .and_then(|l| l.parse().ok())
            .ok_or_else(bad)?;
        let kind = match kind {
            "mlp_up" => SiteKind::MlpUp,
            "mlp_down" => SiteKind::MlpDown,
            _ => return Err(bad()),
        };
        Ok(SiteId { layer, kind })
    }
}

/// Site identity plus the shape of the weight it adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteShape {
    pub site: SiteId,
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Qa,
    FactCheck,
    SlotFill,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::Qa, TaskType::FactCheck, TaskType::SlotFill];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Qa => "qa",
            TaskType::FactCheck => "fact_check",
            TaskType::SlotFill => "slot_fill",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| OsdError::Argument(format!("unknown task type {s:?}")))
    }
}

/// How a knowledge adapter relates to the task adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Trained without the task adapter; merged alone at inference.
    Entangled,
    /// Trained on top of the frozen task adapter with an overlap penalty.
    Soft,
    /// Down-projection confined to the task adapter's null space.
    Hard,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Entangled, Variant::Soft, Variant::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Entangled => "entangled",
            Variant::Soft => "soft",
            Variant::Hard => "hard",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| OsdError::Argument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub site: SiteId,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraLayer {
    pub fn new(site: SiteId, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(OsdError::shape(
                "LoraLayer::new",
                format!("A is {:?} but B is {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(Self { site, a, b })
    }

    pub fn zeros(shape: SiteShape, rank: usize) -> Self {
        Self {
            site: shape.site,
            a: Matrix::zeros(rank, shape.d_in),
            b: Matrix::zeros(shape.d_out, rank),
        }
    }

    /// Gaussian `A`, zero `B`: the update starts at `ΔW = 0`.
    pub fn init(shape: SiteShape, rank: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
        Self {
            site: shape.site,
            a: Matrix::from_fn(rank, shape.d_in, |_, _| normal.sample(rng)),
            b: Matrix::zeros(shape.d_out, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn shape(&self) -> SiteShape {
        SiteShape {
            site: self.site,
            d_out: self.d_out(),
            d_in: self.d_in(),
        }
    }
}

/// `ΔW = B·A`.
pub fn delta_w(layer: &LoraLayer) -> Matrix {
    matmul(&layer.b, &layer.a).expect("LoraLayer keeps A and B conformable")
}

/// Shared adapter for one task type.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapter {
    pub task_type: TaskType,
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
}

impl TaskAdapter {
    pub fn new(task_type: TaskType, layers: Vec<LoraLayer>) -> Result<Self> {
        let rank = check_layers(&layers)?;
        Ok(Self {
            task_type,
            rank,
            layers,
        })
    }

    pub fn zeros(task_type: TaskType, shapes: &[SiteShape], rank: usize) -> Self {
        Self {
            task_type,
            rank,
            layers: shapes.iter().map(|s| LoraLayer::zeros(*s, rank)).collect(),
        }
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.layers.iter().map(|l| l.site).collect()
    }

    pub fn layer(&self, site: SiteId) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.site == site)
    }
}

/// Null-space parameterisation of one site of a hard-variant adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct HardSite {
    pub a_hat: Matrix,
    pub basis: Arc<NullSpaceBasis>,
}

/// `A_K = Â · V_⊥ᵀ`.
pub fn expand_hard(a_hat: &Matrix, basis: &NullSpaceBasis) -> Result<Matrix> {
    if a_hat.cols() != basis.null_dim() {
        return Err(OsdError::shape(
            "expand_hard",
            format!(
                "Â has {} columns, null space has dimension {}",
                a_hat.cols(),
                basis.null_dim()
            ),
        ));
    }
    a_hat.matmul_t(&basis.v_perp)
}

/// Per-document adapter. For the hard variant, `A` at every site is derived
/// from `Â` and kept in sync by every mutator.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeAdapter {
    doc_id: String,
    variant: Variant,
    rank: usize,
    layers: Vec<LoraLayer>,
    hard: Option<Vec<HardSite>>,
}

impl KnowledgeAdapter {
    /// Entangled or soft adapter from explicit layers.
    pub fn new(
        doc_id: impl Into<String>,
        variant: Variant,
        layers: Vec<LoraLayer>,
    ) -> Result<Self> {
        if variant == Variant::Hard {
            return Err(OsdError::UnsupportedVariant("hard"));
        }
        let rank = check_layers(&layers)?;
        Ok(Self {
            doc_id: doc_id.into(),
            variant,
            rank,
            layers,
            hard: None,
        })
    }

    /// Hard adapter from per-site `B`, `Â` and null-space bases; `A` is
    /// expanded here.
    pub fn new_hard(
        doc_id: impl Into<String>,
        sites: Vec<SiteId>,
        b: Vec<Matrix>,
        hard: Vec<HardSite>,
    ) -> Result<Self> {
        if sites.len() != b.len() || sites.len() != hard.len() {
            return Err(OsdError::Structural(format!(
                "{} sites, {} B matrices, {} hard parameterisations",
                sites.len(),
                b.len(),
                hard.len()
            )));
        }
        let mut layers = Vec::with_capacity(sites.len());
        for ((site, b), h) in sites.into_iter().zip(b).zip(&hard) {
            let a = expand_hard(&h.a_hat, &h.basis)?;
            layers.push(LoraLayer::new(site, a, b)?);
        }
        let rank = check_layers(&layers)?;
        Ok(Self {
            doc_id: doc_id.into(),
            variant: Variant::Hard,
            rank,
            layers,
            hard: Some(hard),
        })
    }

    /// Fresh adapter: Gaussian `A` (or `Â`), zero `B`.
    pub fn init(
        doc_id: impl Into<String>,
        variant: Variant,
        shapes: &[SiteShape],
        rank: usize,
        bases: Option<&[Arc<NullSpaceBasis>]>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if variant != Variant::Hard {
            let layers = shapes
                .iter()
                .map(|s| LoraLayer::init(*s, rank, rng))
                .collect();
            return Self::new(doc_id, variant, layers);
        }
        let bases = bases.ok_or_else(|| {
            OsdError::Structural("hard variant needs one null-space basis per site".into())
        })?;
        if bases.len() != shapes.len() {
            return Err(OsdError::Structural(format!(
                "{} bases for {} sites",
                bases.len(),
                shapes.len()
            )));
        }
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
        let mut hard = Vec::with_capacity(shapes.len());
        let mut bs = Vec::with_capacity(shapes.len());
        for (shape, basis) in shapes.iter().zip(bases) {
            if basis.dim() != shape.d_in {
                return Err(OsdError::shape(
                    "KnowledgeAdapter::init",
                    format!("basis for {} has dimension {}", shape.site, basis.dim()),
                ));
            }
            hard.push(HardSite {
                a_hat: Matrix::from_fn(rank, basis.null_dim(), |_, _| normal.sample(rng)),
                basis: Arc::clone(basis),
            });
            bs.push(Matrix::zeros(shape.d_out, rank));
        }
        Self::new_hard(doc_id, shapes.iter().map(|s| s.site).collect(), bs, hard)
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn hard_sites(&self) -> Option<&[HardSite]> {
        self.hard.as_deref()
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.layers.iter().map(|l| l.site).collect()
    }

    /// Replaces `B` at site index `i`.
    pub fn set_b(&mut self, i: usize, b: Matrix) -> Result<()> {
        let layer = &mut self.layers[i];
        if b.shape() != layer.b.shape() {
            return Err(OsdError::shape(
                "set_b",
                format!("{:?} vs {:?}", b.shape(), layer.b.shape()),
            ));
        }
        layer.b = b;
        Ok(())
    }

    /// Replaces `A` at site index `i`. Not available for the hard variant,
    /// whose `A` is derived.
    pub fn set_a(&mut self, i: usize, a: Matrix) -> Result<()> {
        if self.variant == Variant::Hard {
            return Err(OsdError::UnsupportedVariant("hard"));
        }
        let layer = &mut self.layers[i];
        if a.shape() != layer.a.shape() {
            return Err(OsdError::shape(
                "set_a",
                format!("{:?} vs {:?}", a.shape(), layer.a.shape()),
            ));
        }
        layer.a = a;
        Ok(())
    }

    /// Replaces `Â` at site index `i` and re-expands `A`.
    pub fn set_a_hat(&mut self, i: usize, a_hat: Matrix) -> Result<()> {
        let hard = self
            .hard
            .as_mut()
            .ok_or(OsdError::UnsupportedVariant("non-hard"))?;
        let site = &mut hard[i];
        if a_hat.shape() != site.a_hat.shape() {
            return Err(OsdError::shape(
                "set_a_hat",
                format!("{:?} vs {:?}", a_hat.shape(), site.a_hat.shape()),
            ));
        }
        self.layers[i].a = expand_hard(&a_hat, &site.basis)?;
        site.a_hat = a_hat;
        Ok(())
    }
}

fn check_layers(layers: &[LoraLayer]) -> Result<usize> {
    let rank = layers
        .first()
        .map(LoraLayer::rank)
        .ok_or_else(|| OsdError::Structural("adapter without layers".into()))?;
    for l in layers {
        if l.rank() != rank || l.b.cols() != rank {
            return Err(OsdError::Structural(format!(
                "site {} has rank {} but the adapter rank is {rank}",
                l.site,
                l.rank()
            )));
        }
    }
    for w in layers.windows(2) {
        if w[0].site >= w[1].site {
            return Err(OsdError::Structural(
                "sites must be strictly ordered".into(),
            ));
        }
    }
    Ok(rank)
}

fn paired_layers<'a>(
    task: &'a TaskAdapter,
    know: &'a KnowledgeAdapter,
) -> Result<impl Iterator<Item = (&'a LoraLayer, &'a LoraLayer)>> {
    if task.sites() != know.sites() {
        return Err(OsdError::Structural(format!(
            "task adapter sites {:?} differ from knowledge adapter {} sites",
            task.sites(),
            know.doc_id
        )));
    }
    Ok(task.layers.iter().zip(&know.layers))
}

/// `Σ_ℓ ‖A_T^{(ℓ)} A_K^{(ℓ)ᵀ}‖_F²`.
pub fn overlap_penalty(task: &TaskAdapter, know: &KnowledgeAdapter) -> Result<f64> {
    paired_layers(task, know)?.try_fold(0.0, |acc, (t, k)| Ok(acc + cross_overlap(&t.a, &k.a)?))
}

/// The same sum evaluated through the trace form per site.
pub fn overlap_penalty_trace(task: &TaskAdapter, know: &KnowledgeAdapter) -> Result<f64> {
    paired_layers(task, know)?.try_fold(0.0, |acc, (t, k)| {
        Ok(acc + cross_overlap_trace(&t.a, &k.a)?)
    })
}

/// Per-site gradient of [`overlap_penalty`] with respect to `A_K`:
/// `2·A_K·A_TᵀA_T`.
pub fn overlap_penalty_grad(task: &TaskAdapter, know: &KnowledgeAdapter) -> Result<Vec<Matrix>> {
    if know.variant == Variant::Hard {
        return Err(OsdError::UnsupportedVariant("hard"));
    }
    paired_layers(task, know)?
        .map(|(t, k)| {
            let cross = k.a.matmul_t(&t.a)?; // r_K × r_T
            Ok(matmul(&cross, &t.a)?.scale(2.0))
        })
        .collect()
}

/// Convex weights over `k` merged adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights(Vec<f64>);

impl MergeWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(OsdError::EmptyMerge);
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(OsdError::Argument(format!(
                "merge weights must be finite and non-negative: {alphas:?}"
            )));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(OsdError::Argument(format!(
                "merge weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(alphas))
    }

    pub fn alphas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn uniform_weights(k: usize) -> Result<MergeWeights> {
    if k == 0 {
        return Err(OsdError::EmptyMerge);
    }
    Ok(MergeWeights(vec![1.0 / k as f64; k]))
}

/// Weights proportional to the positive part of retrieval scores; uniform
/// when no score is positive.
pub fn score_weights(scores: &[f64]) -> Result<MergeWeights> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(OsdError::Argument("retrieval scores must be finite".into()));
    }
    let clamped: Vec<f64> = scores.iter().map(|s| s.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return uniform_weights(scores.len());
    }
    Ok(MergeWeights(
        clamped.into_iter().map(|s| s / total).collect(),
    ))
}

/// Per-site merged knowledge update `ΔW_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedKnowledge {
    pub deltas: Vec<(SiteId, Matrix)>,
}

impl MergedKnowledge {
    pub fn delta(&self, site: SiteId) -> Option<&Matrix> {
        self.deltas.iter().find(|(s, _)| *s == site).map(|(_, m)| m)
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.deltas.iter().map(|(s, _)| *s).collect()
    }
}

/// `Σ_i α_i B_i A_i` per site, merged on the composed products.
pub fn merge(adapters: &[&KnowledgeAdapter], weights: &MergeWeights) -> Result<MergedKnowledge> {
    if adapters.is_empty() {
        return Err(OsdError::EmptyMerge);
    }
    if weights.len() != adapters.len() {
        return Err(OsdError::Structural(format!(
            "{} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    let variant = adapters[0].variant;
    if let Some(other) = adapters.iter().find(|a| a.variant != variant) {
        return Err(OsdError::Structural(format!(
            "cannot merge {} adapter {} with {variant} adapters",
            other.variant, other.doc_id
        )));
    }
    weighted_sum(adapters, weights.alphas())
}

/// Unnormalised per-site `Σ_i c_i ΔW_i`.
pub fn weighted_sum(adapters: &[&KnowledgeAdapter], coeffs: &[f64]) -> Result<MergedKnowledge> {
    let first = adapters.first().ok_or(OsdError::EmptyMerge)?;
    if coeffs.len() != adapters.len() {
        return Err(OsdError::Structural(format!(
            "{} coefficients for {} adapters",
            coeffs.len(),
            adapters.len()
        )));
    }
    let sites = first.sites();
    if let Some(other) = adapters.iter().find(|a| a.sites() != sites) {
        return Err(OsdError::Structural(format!(
            "adapter {} has a different site set",
            other.doc_id
        )));
    }
    let deltas = (0..sites.len())
        .map(|i| {
            let mut acc = delta_w(&first.layers[i]).scale(coeffs[0]);
            for (ad, c) in adapters.iter().zip(coeffs).skip(1) {
                acc.axpy(*c, &delta_w(&ad.layers[i]))?;
            }
            Ok((sites[i], acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergedKnowledge { deltas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenKind {
    ASide,
    BSide,
    All,
}

impl FlattenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlattenKind::ASide => "a_side",
            FlattenKind::BSide => "b_side",
            FlattenKind::All => "all",
        }
    }
}

/// Site-ordered, row-major concatenation of the selected matrices. Hard
/// adapters contribute their expanded `A`.
pub fn flatten(adapter: &KnowledgeAdapter, kind: FlattenKind) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &adapter.layers {
        if matches!(kind, FlattenKind::ASide | FlattenKind::All) {
            out.extend_from_slice(l.a.as_slice());
        }
        if matches!(kind, FlattenKind::BSide | FlattenKind::All) {
            out.extend_from_slice(l.b.as_slice());
        }
    }
    out
}

/// Inverse of [`flatten`] against a structural template: returns the
/// template's layers with the flattened matrices replaced.
pub fn unflatten(
    template: &KnowledgeAdapter,
    kind: FlattenKind,
    values: &[f64],
) -> Result<Vec<LoraLayer>> {
    let mut pos = 0;
    let mut take = |m: &Matrix| -> Result<Matrix> {
        let n = m.rows() * m.cols();
        let chunk = values
            .get(pos..pos + n)
            .ok_or_else(|| OsdError::shape("unflatten", "vector too short"))?;
        pos += n;
        Matrix::from_vec(m.rows(), m.cols(), chunk.to_vec())
    };
    let mut layers = Vec::with_capacity(template.layers.len());
    for l in &template.layers {
        let a = if matches!(kind, FlattenKind::ASide | FlattenKind::All) {
            take(&l.a)?
        } else {
            l.a.clone()
        };
        let b = if matches!(kind, FlattenKind::BSide | FlattenKind::All) {
            take(&l.b)?
        } else {
            l.b.clone()
        };
        layers.push(LoraLayer { site: l.site, a, b });
    }
    if pos != values.len() {
        return Err(OsdError::shape("unflatten", "vector too long"));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::null_space_basis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn shapes() -> Vec<SiteShape> {
        vec![
            SiteShape {
                site: SiteId::new(0, SiteKind::MlpUp),
                d_out: 10,
                d_in: 6,
            },
            SiteShape {
                site: SiteId::new(0, SiteKind::MlpDown),
                d_out: 6,
                d_in: 10,
            },
        ]
    }

    fn random_task(rank: usize, seed: u64) -> TaskAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shapes()
            .iter()
            .map(|s| LoraLayer {
                site: s.site,
                a: random(rank, s.d_in, &mut rng),
                b: random(s.d_out, rank, &mut rng),
            })
            .collect();
        TaskAdapter::new(TaskType::Qa, layers).unwrap()
    }

    fn random_know(doc: &str, variant: Variant, rank: usize, seed: u64) -> KnowledgeAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shapes()
            .iter()
            .map(|s| LoraLayer {
                site: s.site,
                a: random(rank, s.d_in, &mut rng),
                b: random(s.d_out, rank, &mut rng),
            })
            .collect();
        KnowledgeAdapter::new(doc, variant, layers).unwrap()
    }

    fn bases_for(task: &TaskAdapter) -> Vec<Arc<NullSpaceBasis>> {
        task.layers
            .iter()
            .map(|l| Arc::new(null_space_basis(&l.a, 1e-5).unwrap()))
            .collect()
    }

    fn random_hard(task: &TaskAdapter, doc: &str, rank: usize, seed: u64) -> KnowledgeAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = bases_for(task);
        let hard: Vec<HardSite> = bases
            .iter()
            .map(|b| HardSite {
                a_hat: random(rank, b.null_dim(), &mut rng),
                basis: Arc::clone(b),
            })
            .collect();
        let bs = shapes()
            .iter()
            .map(|s| random(s.d_out, rank, &mut rng))
            .collect();
        KnowledgeAdapter::new_hard(doc, task.sites(), bs, hard).unwrap()
    }

    #[test]
    fn site_id_round_trips_through_text() {
        let s = SiteId::new(3, SiteKind::MlpDown);
        assert_eq!(s.to_string(), "layer3.mlp_down");
        assert_eq!("layer3.mlp_down".parse::<SiteId>().unwrap(), s);
        assert!("layer3.attn".parse::<SiteId>().is_err());
    }

    #[test]
    fn delta_w_examples() {
        let s = SiteId::new(0, SiteKind::MlpUp);
        let zero_b = LoraLayer::new(s, Matrix::identity(3), Matrix::zeros(3, 3)).unwrap();
        assert_eq!(delta_w(&zero_b), Matrix::zeros(3, 3));

        let e1 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let unit = LoraLayer::new(s, e1.clone(), e1.transpose()).unwrap();
        let mut e11 = Matrix::zeros(3, 3);
        e11[(0, 0)] = 1.0;
        assert_eq!(delta_w(&unit), e11);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 7, &mut rng);
        let b = random(5, 4, &mut rng);
        let got = delta_w(&LoraLayer::new(s, a.clone(), b.clone()).unwrap());
        for i in 0..5 {
            for j in 0..7 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += b[(i, k)] * a[(k, j)];
                }
                assert_eq!(got[(i, j)].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn expand_hard_examples() {
        let a_t = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let basis = null_space_basis(&a_t, 1e-5).unwrap();
        assert_eq!(
            expand_hard(&Matrix::zeros(1, 2), &basis).unwrap(),
            Matrix::zeros(1, 3)
        );
        let a_k = expand_hard(&Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), &basis).unwrap();
        assert!(a_k[(0, 0)].abs() <= 1e-15);
        assert!(a_k.matmul_t(&a_t).unwrap().max_abs() <= 1e-10);
        assert!(expand_hard(&Matrix::zeros(1, 3), &basis).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_t = random(4, 16, &mut rng);
        let basis = null_space_basis(&a_t, 1e-5).unwrap();
        let a_k = expand_hard(&random(3, 12, &mut rng), &basis).unwrap();
        assert!(a_k.matmul_t(&a_t).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn hard_adapter_has_no_overlap() {
        let task = random_task(3, 3);
        let hard = random_hard(&task, "d0", 2, 4);
        assert!(overlap_penalty(&task, &hard).unwrap() <= 1e-18);
        for (t, k) in task.layers.iter().zip(hard.layers()) {
            assert!(k.a.matmul_t(&t.a).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn set_a_hat_keeps_expansion_in_sync() {
        let task = random_task(3, 5);
        let mut hard = random_hard(&task, "d0", 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = hard.hard_sites().unwrap()[1].a_hat.cols();
        hard.set_a_hat(1, random(2, dim, &mut rng)).unwrap();
        let h = &hard.hard_sites().unwrap()[1];
        assert_eq!(hard.layers()[1].a, expand_hard(&h.a_hat, &h.basis).unwrap());
        assert!(overlap_penalty(&task, &hard).unwrap() <= 1e-18);
        assert_eq!(
            hard.set_a(0, Matrix::zeros(2, 6)),
            Err(OsdError::UnsupportedVariant("hard"))
        );
    }

    #[test]
    fn self_overlap_of_orthonormal_rows_is_rank() {
        let site = SiteId::new(0, SiteKind::MlpUp);
        let q = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let task = TaskAdapter::new(
            TaskType::Qa,
            vec![LoraLayer::new(site, q.clone(), Matrix::zeros(3, 2)).unwrap()],
        )
        .unwrap();
        let know = KnowledgeAdapter::new(
            "d",
            Variant::Soft,
            vec![LoraLayer::new(site, q, Matrix::zeros(3, 2)).unwrap()],
        )
        .unwrap();
        assert_eq!(overlap_penalty(&task, &know).unwrap(), 2.0);
    }

    #[test]
    fn penalty_matches_trace_identity() {
        for seed in 0..8 {
            let task = random_task(4, seed);
            let know = random_know("d", Variant::Soft, 3, seed + 50);
            let p = overlap_penalty(&task, &know).unwrap();
            let t = overlap_penalty_trace(&task, &know).unwrap();
            assert!((p - t).abs() <= 1e-9, "{p} vs {t}");
        }
    }

    #[test]
    fn penalty_site_mismatch_is_structural() {
        let task = random_task(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let only_up = KnowledgeAdapter::new(
            "d",
            Variant::Soft,
            vec![LoraLayer::init(shapes()[0], 2, &mut rng)],
        )
        .unwrap();
        assert!(matches!(
            overlap_penalty(&task, &only_up),
            Err(OsdError::Structural(_))
        ));
    }

    #[test]
    fn penalty_grad_examples() {
        let site = SiteId::new(0, SiteKind::MlpUp);
        // a_k orthogonal to the row space of a_t
        let a_t = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let a_k = Matrix::from_rows(&[vec![0.0, 2.0, -1.0]]).unwrap();
        let task = TaskAdapter::new(
            TaskType::Qa,
            vec![LoraLayer::new(site, a_t, Matrix::zeros(2, 1)).unwrap()],
        )
        .unwrap();
        let know = KnowledgeAdapter::new(
            "d",
            Variant::Soft,
            vec![LoraLayer::new(site, a_k, Matrix::zeros(2, 1)).unwrap()],
        )
        .unwrap();
        assert_eq!(
            overlap_penalty_grad(&task, &know).unwrap()[0],
            Matrix::zeros(1, 3)
        );

        // A_T = I
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a_k = random(2, 3, &mut rng);
        let task = TaskAdapter::new(
            TaskType::Qa,
            vec![LoraLayer::new(site, Matrix::identity(3), Matrix::zeros(2, 3)).unwrap()],
        )
        .unwrap();
        let know = KnowledgeAdapter::new(
            "d",
            Variant::Soft,
            vec![LoraLayer::new(site, a_k.clone(), Matrix::zeros(2, 2)).unwrap()],
        )
        .unwrap();
        assert!(
            overlap_penalty_grad(&task, &know).unwrap()[0].max_abs_diff(&a_k.scale(2.0)) <= 1e-15
        );
    }

    #[test]
    fn penalty_grad_matches_finite_differences_per_site() {
        let task = random_task(4, 11);
        let know = random_know("d", Variant::Soft, 3, 12);
        let grads = overlap_penalty_grad(&task, &know).unwrap();
        let h = 1e-6;
        for (i, g) in grads.iter().enumerate() {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let eval = |delta: f64| {
                        let mut k = know.clone();
                        let mut a = k.layers()[i].a.clone();
                        a[(r, c)] += delta;
                        k.set_a(i, a).unwrap();
                        overlap_penalty(&task, &k).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let rel = (fd - g[(r, c)]).abs() / g[(r, c)].abs().max(fd.abs()).max(1e-6);
                    assert!(rel <= 1e-5, "site {i} ({r},{c}): {} vs {fd}", g[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn penalty_grad_rejects_hard() {
        let task = random_task(3, 13);
        let hard = random_hard(&task, "d", 2, 14);
        assert_eq!(
            overlap_penalty_grad(&task, &hard),
            Err(OsdError::UnsupportedVariant("hard"))
        );
    }

    #[test]
    fn weight_constructors() {
        assert_eq!(uniform_weights(1).unwrap().alphas(), &[1.0]);
        assert_eq!(uniform_weights(4).unwrap().alphas(), &[0.25; 4]);
        assert!((uniform_weights(3).unwrap().alphas().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(uniform_weights(0), Err(OsdError::EmptyMerge));
        assert_eq!(score_weights(&[2.0, 2.0]).unwrap().alphas(), &[0.5, 0.5]);
        assert_eq!(score_weights(&[3.0, 1.0]).unwrap().alphas(), &[0.75, 0.25]);
        assert_eq!(score_weights(&[0.0, 0.0]).unwrap().alphas(), &[0.5, 0.5]);
        assert_eq!(score_weights(&[-1.0, 3.0]).unwrap().alphas(), &[0.0, 1.0]);
        assert!(MergeWeights::new(vec![0.5, 0.6]).is_err());
        assert!(MergeWeights::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn merge_single_adapter_is_bit_identical() {
        let k = random_know("d", Variant::Soft, 3, 20);
        let merged = merge(&[&k], &uniform_weights(1).unwrap()).unwrap();
        for (l, (site, d)) in k.layers().iter().zip(&merged.deltas) {
            assert_eq!(*site, l.site);
            let want = delta_w(l);
            assert!(want
                .as_slice()
                .iter()
                .zip(d.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn merge_of_copies_is_fixed_point() {
        let k = random_know("d", Variant::Soft, 3, 21);
        let merged = merge(&[&k, &k, &k, &k, &k], &uniform_weights(5).unwrap()).unwrap();
        for (l, (_, d)) in k.layers().iter().zip(&merged.deltas) {
            assert!(d.max_abs_diff(&delta_w(l)) <= 1e-12);
        }
    }

    #[test]
    fn merge_matches_scalar_oracle() {
        let ks: Vec<_> = (0..3)
            .map(|i| random_know(&format!("d{i}"), Variant::Soft, 3, 30 + i))
            .collect();
        let refs: Vec<_> = ks.iter().collect();
        let alphas = [0.5, 0.3, 0.2];
        let merged = merge(&refs, &MergeWeights::new(alphas.to_vec()).unwrap()).unwrap();
        for (s, (_, d)) in merged.deltas.iter().enumerate() {
            for i in 0..d.rows() {
                for j in 0..d.cols() {
                    let mut want = 0.0;
                    for (k, alpha) in ks.iter().zip(alphas) {
                        let l = &k.layers()[s];
                        let mut e = 0.0;
                        for r in 0..l.rank() {
                            e += l.b[(i, r)] * l.a[(r, j)];
                        }
                        want += alpha * e;
                    }
                    assert!((d[(i, j)] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn merge_errors() {
        let a = random_know("a", Variant::Soft, 2, 1);
        let b = random_know("b", Variant::Entangled, 2, 2);
        assert_eq!(
            merge(&[], &uniform_weights(1).unwrap()),
            Err(OsdError::EmptyMerge)
        );
        assert!(matches!(
            merge(&[&a], &uniform_weights(2).unwrap()),
            Err(OsdError::Structural(_))
        ));
        assert!(matches!(
            merge(&[&a, &b], &uniform_weights(2).unwrap()),
            Err(OsdError::Structural(_))
        ));
    }

    #[test]
    fn flatten_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zero = KnowledgeAdapter::new(
            "z",
            Variant::Soft,
            shapes().iter().map(|s| LoraLayer::zeros(*s, 2)).collect(),
        )
        .unwrap();
        let flat = flatten(&zero, FlattenKind::All);
        assert_eq!(flat.len(), 2 * 6 + 10 * 2 + 2 * 10 + 6 * 2);
        assert!(flat.iter().all(|v| *v == 0.0));

        let x = KnowledgeAdapter::init("x", Variant::Soft, &shapes(), 2, None, &mut rng).unwrap();
        let y = KnowledgeAdapter::init("y", Variant::Soft, &shapes(), 2, None, &mut rng).unwrap();
        for kind in [FlattenKind::ASide, FlattenKind::BSide, FlattenKind::All] {
            assert_eq!(flatten(&x, kind).len(), flatten(&y, kind).len());
        }
    }

    #[test]
    fn hard_flatten_uses_expanded_a() {
        let task = random_task(3, 40);
        let hard = random_hard(&task, "h", 2, 41);
        let soft = random_know("s", Variant::Soft, 2, 42);
        assert_eq!(
            flatten(&hard, FlattenKind::ASide).len(),
            flatten(&soft, FlattenKind::ASide).len()
        );
        assert_eq!(
            &flatten(&hard, FlattenKind::ASide)[..12],
            hard.layers()[0].a.as_slice()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unflatten_inverts_flatten(seed in 0u64..500, kind in prop_oneof![Just(FlattenKind::ASide), Just(FlattenKind::BSide), Just(FlattenKind::All)]) {
            let k = random_know("d", Variant::Soft, 3, seed);
            let layers = unflatten(&k, kind, &flatten(&k, kind)).unwrap();
            prop_assert_eq!(layers.as_slice(), k.layers());
        }

        #[test]
        fn merge_is_linear_in_weights(seed in 0u64..500, a in prop::collection::vec(0.0f64..1.0, 3), b in prop::collection::vec(0.0f64..1.0, 3)) {
            let ks: Vec<_> = (0..3).map(|i| random_know(&format!("d{i}"), Variant::Soft, 2, seed * 7 + i)).collect();
            let refs: Vec<_> = ks.iter().collect();
            let ma = weighted_sum(&refs, &a).unwrap();
            let mb = weighted_sum(&refs, &b).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let mab = weighted_sum(&refs, &sum).unwrap();
            for ((_, x), ((_, y), (_, z))) in ma.deltas.iter().zip(mb.deltas.iter().zip(&mab.deltas)) {
                prop_assert!(x.add(y).unwrap().max_abs_diff(z) <= 1e-12);
            }
        }

        #[test]
        fn self_cosine_is_one(seed in 0u64..500) {
            let k = random_know("d", Variant::Soft, 2, seed);
            let f = flatten(&k, FlattenKind::All);
            prop_assert!((crate::linalg::cosine(&f, &f).unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}
