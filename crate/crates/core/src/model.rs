//! Frozen toy decoder-only transformer with LoRA attach points on the MLP
//! projections.
//!
//! Pre-norm residual blocks (parameter-free LayerNorm), multi-head causal
//! attention, tanh-approximated GELU, learned positional embeddings and an
//! untied output head. Gradients are propagated by hand and only the
//! effective MLP weights `W₀ + ΔW` receive parameter gradients; everything
//! else is frozen.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    delta_w, KnowledgeAdapter, MergedKnowledge, SiteId, SiteKind, SiteShape, TaskAdapter, Variant,
};
use crate::error::{OsdError, Result};
use crate::linalg::{matmul_unchecked, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Std of every hidden weight and embedding.
    pub init_std: f64,
    /// Std of the output head.
    pub head_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 128,
            seed: 0,
            init_std: 0.125,
            head_std: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(OsdError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(OsdError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0 && self.head_std > 0.0) {
            return Err(OsdError::Config(
                "initialisation stds must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `{mlp_up, mlp_down}` × every layer, in site order.
    pub fn adapted_sites(&self) -> Vec<SiteShape> {
        (0..self.n_layers)
            .flat_map(|layer| {
                [
                    SiteShape {
                        site: SiteId::new(layer, SiteKind::MlpUp),
                        d_out: self.d_ff,
                        d_in: self.d_model,
                    },
                    SiteShape {
                        site: SiteId::new(layer, SiteKind::MlpDown),
                        d_out: self.d_model,
                        d_in: self.d_ff,
                    },
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

/// Frozen base parameters θ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    head: Matrix,
}

pub fn init_base(config: &ModelConfig) -> Result<BaseWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hidden = Normal::new(0.0, config.init_std).expect("positive std");
    let mut draw = |rows: usize, cols: usize, dist: &Normal<f64>| {
        Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
    };
    let (d, f) = (config.d_model, config.d_ff);
    let tok_emb = draw(config.vocab_size, d, &hidden);
    let pos_emb = draw(config.max_seq, d, &hidden);
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            wq: draw(d, d, &hidden),
            wk: draw(d, d, &hidden),
            wv: draw(d, d, &hidden),
            wo: draw(d, d, &hidden),
            w_up: draw(f, d, &hidden),
            w_down: draw(d, f, &hidden),
        })
        .collect();
    let head_dist = Normal::new(0.0, config.head_std).expect("positive std");
    let head = draw(config.vocab_size, d, &head_dist);
    Ok(BaseWeights {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        head,
    })
}

impl BaseWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapted_sites(&self) -> Vec<SiteShape> {
        self.config.adapted_sites()
    }

    /// SHA-256 over the configuration and every weight, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        let mut feed = |m: &Matrix| {
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.tok_emb);
        feed(&self.pos_emb);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down] {
                feed(m);
            }
        }
        feed(&self.head);
        hex::encode(h.finalize())
    }

    /// Copy with `W₀ + delta` substituted at one adapted site.
    pub fn with_dense_update(&self, site: SiteId, delta: &Matrix) -> Result<BaseWeights> {
        let mut out = self.clone();
        let block = out
            .blocks
            .get_mut(site.layer)
            .ok_or_else(|| OsdError::Structural(format!("no layer {}", site.layer)))?;
        let w = match site.kind {
            SiteKind::MlpUp => &mut block.w_up,
            SiteKind::MlpDown => &mut block.w_down,
        };
        w.axpy(1.0, delta)?;
        Ok(out)
    }

    fn site_weight(&self, idx: usize) -> &Matrix {
        let b = &self.blocks[idx / 2];
        if idx.is_multiple_of(2) {
            &b.w_up
        } else {
            &b.w_down
        }
    }
}

fn site_index(site: SiteId) -> usize {
    site.layer * 2 + usize::from(site.kind == SiteKind::MlpDown)
}

/// One causal LM sequence: `targets[t]` is predicted from `tokens[..=t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    /// `[bos] + prompt + answer` shifted into inputs and targets; only the
    /// answer positions are scored.
    pub fn from_prompt_answer(bos: u32, prompt: &[u32], answer: &[u32]) -> Self {
        let mut seq = Vec::with_capacity(1 + prompt.len() + answer.len());
        seq.push(bos);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(answer);
        let n = seq.len() - 1;
        let answer_start = 1 + prompt.len();
        Self {
            tokens: seq[..n].to_vec(),
            targets: seq[1..].to_vec(),
            loss_mask: (0..n).map(|t| t + 1 >= answer_start).collect(),
        }
    }

    fn masked_positions(&self) -> Vec<usize> {
        (0..self.loss_mask.len())
            .filter(|&t| self.loss_mask[t])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn masked_count(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| &e.loss_mask)
            .filter(|m| **m)
            .count()
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            if e.tokens.len() != e.targets.len() || e.tokens.len() != e.loss_mask.len() {
                return Err(OsdError::Structural(format!(
                    "example {i}: token/target/mask lengths differ"
                )));
            }
            if e.tokens.is_empty() || e.tokens.len() > config.max_seq {
                return Err(OsdError::Structural(format!(
                    "example {i}: length {} outside 1..={}",
                    e.tokens.len(),
                    config.max_seq
                )));
            }
            if let Some(t) = e
                .tokens
                .iter()
                .chain(&e.targets)
                .find(|t| **t as usize >= config.vocab_size)
            {
                return Err(OsdError::Structural(format!(
                    "example {i}: token id {t} out of vocabulary"
                )));
            }
        }
        Ok(())
    }
}

/// Per-example `T × vocab` logits.
pub type Logits = Vec<Matrix>;

/// Effective weight per adapted site: `W₀` alone or `W₀ + Σ ΔW`.
struct Effective<'a> {
    weights: Vec<Cow<'a, Matrix>>,
}

impl<'a> Effective<'a> {
    fn new(base: &'a BaseWeights, deltas: Vec<Option<Matrix>>) -> Result<Self> {
        let weights = deltas
            .into_iter()
            .enumerate()
            .map(|(i, d)| match d {
                None => Ok(Cow::Borrowed(base.site_weight(i))),
                Some(d) => Ok(Cow::Owned(base.site_weight(i).add(&d)?)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights })
    }

    fn up(&self, layer: usize) -> &Matrix {
        &self.weights[layer * 2]
    }

    fn down(&self, layer: usize) -> &Matrix {
        &self.weights[layer * 2 + 1]
    }
}

fn check_sites(base: &BaseWeights, sites: &[SiteId], what: &str) -> Result<()> {
    let want: Vec<SiteId> = base.adapted_sites().iter().map(|s| s.site).collect();
    if sites != want.as_slice() {
        return Err(OsdError::Structural(format!(
            "{what} sites {sites:?} do not match the model's adapted sites {want:?}"
        )));
    }
    Ok(())
}

fn accumulate(deltas: &mut [Option<Matrix>], idx: usize, d: &Matrix) -> Result<()> {
    match &mut deltas[idx] {
        Some(acc) => acc.axpy(1.0, d),
        slot @ None => {
            *slot = Some(d.clone());
            Ok(())
        }
    }
}

fn compose(
    base: &BaseWeights,
    task: Option<&TaskAdapter>,
    merged: Option<&MergedKnowledge>,
    know: Option<&KnowledgeAdapter>,
) -> Result<Vec<Option<Matrix>>> {
    let shapes = base.adapted_sites();
    let mut deltas: Vec<Option<Matrix>> = vec![None; shapes.len()];
    if let Some(task) = task {
        check_sites(base, &task.sites(), "task adapter")?;
        for l in &task.layers {
            accumulate(&mut deltas, site_index(l.site), &delta_w(l))?;
        }
    }
    if let Some(merged) = merged {
        check_sites(base, &merged.sites(), "merged knowledge")?;
        for (site, d) in &merged.deltas {
            accumulate(&mut deltas, site_index(*site), d)?;
        }
    }
    if let Some(know) = know {
        check_sites(base, &know.sites(), "knowledge adapter")?;
        for l in know.layers() {
            accumulate(&mut deltas, site_index(l.site), &delta_w(l))?;
        }
    }
    for (d, s) in deltas.iter().zip(&shapes) {
        if let Some(d) = d {
            if d.shape() != (s.d_out, s.d_in) {
                return Err(OsdError::shape(
                    "forward",
                    format!("delta at {} is {:?}", s.site, d.shape()),
                ));
            }
        }
    }
    Ok(deltas)
}

struct LnCache {
    y: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix) -> LnCache {
    let d = x.cols() as f64;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut rstd = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in y.row_mut(t).iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    LnCache { y, rstd }
}

fn layer_norm_back(cache: &LnCache, dy: &Matrix) -> Matrix {
    let d = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for t in 0..dy.rows() {
        let g = dy.row(t);
        let y = cache.y.row(t);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[t];
        for ((o, gi), yi) in dx.row_mut(t).iter_mut().zip(g).zip(y) {
            *o = r * (gi - mean_g - yi * mean_gy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044_715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044_715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * u * u)
}

struct LayerCache {
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ln2: LnCache,
    up_pre: Matrix,
    act: Matrix,
}

struct ExampleCache {
    layers: Vec<LayerCache>,
    ln_f: LnCache,
}

/// Runs one sequence. Logits are produced for `rows` only.
fn forward_sequence(
    base: &BaseWeights,
    eff: &Effective<'_>,
    tokens: &[u32],
    rows: &[usize],
) -> (Matrix, ExampleCache) {
    let cfg = &base.config;
    let t_len = tokens.len();
    let mut x = Matrix::from_fn(t_len, cfg.d_model, |t, c| {
        base.tok_emb[(tokens[t] as usize, c)] + base.pos_emb[(t, c)]
    });
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, block) in base.blocks.iter().enumerate() {
        let ln1 = layer_norm(&x);
        let q = ln1.y.matmul_t_unchecked(&block.wq);
        let k = ln1.y.matmul_t_unchecked(&block.wk);
        let v = ln1.y.matmul_t_unchecked(&block.wv);
        let mut cat = Matrix::zeros(t_len, cfg.d_model);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let mut p = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let qi = &q.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = scale * crate::linalg::dot(qi, &k.row(j)[off..off + dh]);
                    p[(i, j)] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (p[(i, j)] - max).exp();
                    p[(i, j)] = e;
                    z += e;
                }
                for j in 0..=i {
                    p[(i, j)] /= z;
                }
                let out = &mut cat.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    let w = p[(i, j)];
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let att = cat.matmul_t_unchecked(&block.wo);
        x.axpy(1.0, &att).expect("residual shapes");
        let ln2 = layer_norm(&x);
        let up_pre = ln2.y.matmul_t_unchecked(eff.up(l));
        let mut act = up_pre.clone();
        act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
        let mlp = act.matmul_t_unchecked(eff.down(l));
        x.axpy(1.0, &mlp).expect("residual shapes");
        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            ln2,
            up_pre,
            act,
        });
    }
    let ln_f = layer_norm(&x);
    let mut logits = Matrix::zeros(rows.len(), cfg.vocab_size);
    for (r, &t) in rows.iter().enumerate() {
        let hf = ln_f.y.row(t);
        for (o, w) in logits.row_mut(r).iter_mut().enumerate() {
            *w = crate::linalg::dot(hf, base.head.row(o));
        }
    }
    (logits, ExampleCache { layers, ln_f })
}

/// Accumulates `∂L/∂W_eff` per adapted site given `∂L/∂logits` for `rows`.
fn backward_sequence(
    base: &BaseWeights,
    eff: &Effective<'_>,
    cache: &ExampleCache,
    rows: &[usize],
    dlogits: &Matrix,
    site_grads: &mut [Matrix],
) {
    let cfg = &base.config;
    let t_len = cache.ln_f.y.rows();
    let mut dhf = Matrix::zeros(t_len, cfg.d_model);
    for (r, &t) in rows.iter().enumerate() {
        let dst = dhf.row_mut(t);
        for (o, &g) in dlogits.row(r).iter().enumerate() {
            if g != 0.0 {
                for (d, w) in dst.iter_mut().zip(base.head.row(o)) {
                    *d += g * w;
                }
            }
        }
    }
    let mut dx = layer_norm_back(&cache.ln_f, &dhf);
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let block = &base.blocks[l];
        // MLP
        dx.t_matmul_acc(&lc.act, &mut site_grads[l * 2 + 1]);
        let mut dact = matmul_unchecked(&dx, eff.down(l));
        for (g, u) in dact.as_mut_slice().iter_mut().zip(lc.up_pre.as_slice()) {
            *g *= gelu_grad(*u);
        }
        dact.t_matmul_acc(&lc.ln2.y, &mut site_grads[l * 2]);
        if l == 0 {
            // nothing adapted below the first MLP
            break;
        }
        let dh2 = matmul_unchecked(&dact, eff.up(l));
        dx.axpy(1.0, &layer_norm_back(&lc.ln2, &dh2))
            .expect("shapes");
        // attention
        let dcat = matmul_unchecked(&dx, &block.wo);
        let mut dq = Matrix::zeros(t_len, cfg.d_model);
        let mut dk = Matrix::zeros(t_len, cfg.d_model);
        let mut dv = Matrix::zeros(t_len, cfg.d_model);
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let p = &lc.probs[h];
            for i in 0..t_len {
                let dout = &dcat.row(i)[off..off + dh];
                let mut dp = vec![0.0; i + 1];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = crate::linalg::dot(dout, &lc.v.row(j)[off..off + dh]);
                    let w = p[(i, j)];
                    for (d, g) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dout) {
                        *d += w * g;
                    }
                }
                let inner: f64 = dp.iter().enumerate().map(|(j, g)| p[(i, j)] * g).sum();
                for (j, dpj) in dp.iter().enumerate() {
                    let ds = p[(i, j)] * (dpj - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[(i, off + c)] += ds * lc.k[(j, off + c)];
                        dk[(j, off + c)] += ds * lc.q[(i, off + c)];
                    }
                }
            }
        }
        let mut dh1 = matmul_unchecked(&dq, &block.wq);
        dh1.axpy(1.0, &matmul_unchecked(&dk, &block.wk))
            .expect("shapes");
        dh1.axpy(1.0, &matmul_unchecked(&dv, &block.wv))
            .expect("shapes");
        dx.axpy(1.0, &layer_norm_back(&lc.ln1, &dh1))
            .expect("shapes");
    }
}

/// Logits under `θ₀ + ΔW_T + ΔW_K`; either adapter term may be omitted.
pub fn forward(
    base: &BaseWeights,
    task: Option<&TaskAdapter>,
    merged: Option<&MergedKnowledge>,
    batch: &Batch,
) -> Result<Logits> {
    batch.validate(&base.config)?;
    let eff = Effective::new(base, compose(base, task, merged, None)?)?;
    Ok(batch
        .examples
        .iter()
        .map(|e| {
            let rows: Vec<usize> = (0..e.tokens.len()).collect();
            forward_sequence(base, &eff, &e.tokens, &rows).0
        })
        .collect())
}

fn nll_row(row: &[f64], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Mean negative log-likelihood over the masked positions.
pub fn loss_ce(logits: &[Matrix], batch: &Batch) -> Result<f64> {
    if logits.len() != batch.examples.len() {
        return Err(OsdError::Structural(format!(
            "{} logit blocks for {} examples",
            logits.len(),
            batch.examples.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (lg, e) in logits.iter().zip(&batch.examples) {
        if lg.rows() != e.tokens.len() {
            return Err(OsdError::shape(
                "loss_ce",
                "logit rows differ from sequence length",
            ));
        }
        for t in e.masked_positions() {
            total += nll_row(lg.row(t), e.targets[t] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(OsdError::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Loss and `∂L/∂W_eff` for every adapted site.
fn site_gradients(
    base: &BaseWeights,
    deltas: Vec<Option<Matrix>>,
    batch: &Batch,
) -> Result<(f64, Vec<Matrix>)> {
    batch.validate(&base.config)?;
    let n = batch.masked_count();
    if n == 0 {
        return Err(OsdError::EmptyLoss);
    }
    let eff = Effective::new(base, deltas)?;
    let mut grads: Vec<Matrix> = base
        .adapted_sites()
        .iter()
        .map(|s| Matrix::zeros(s.d_out, s.d_in))
        .collect();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for e in &batch.examples {
        let rows = e.masked_positions();
        if rows.is_empty() {
            continue;
        }
        let (mut logits, cache) = forward_sequence(base, &eff, &e.tokens, &rows);
        for (r, &t) in rows.iter().enumerate() {
            let target = e.targets[t] as usize;
            let row = logits.row_mut(r);
            loss += nll_row(row, target);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v *= inv / z;
            }
            row[target] -= inv;
        }
        backward_sequence(base, &eff, &cache, &rows, &logits, &mut grads);
    }
    Ok((loss * inv, grads))
}

/// Gradient of the masked CE with respect to one LoRA's trainable matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGrad {
    pub site: SiteId,
    /// `∂L/∂A`, or `∂L/∂Â` for a hard-variant adapter.
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub loss: f64,
    pub sites: Vec<SiteGrad>,
}

fn lora_site_grad(a: &Matrix, b: &Matrix, dw: &Matrix) -> (Matrix, Matrix) {
    // ΔW = B·A  ⇒  ∂L/∂A = Bᵀ·∂L/∂W,  ∂L/∂B = ∂L/∂W·Aᵀ
    let da = b.t_matmul(dw).expect("B and ∂W conform");
    let db = dw.matmul_t(a).expect("∂W and A conform");
    (da, db)
}

/// CE gradients for a knowledge adapter trained on top of a frozen task
/// adapter (or alone when `task` is `None`).
pub fn backward_lora(
    base: &BaseWeights,
    task: Option<&TaskAdapter>,
    know: &KnowledgeAdapter,
    batch: &Batch,
) -> Result<LoraGrads> {
    let deltas = compose(base, task, None, Some(know))?;
    let (loss, dws) = site_gradients(base, deltas, batch)?;
    let hard = know.hard_sites();
    let sites = know
        .layers()
        .iter()
        .zip(&dws)
        .enumerate()
        .map(|(i, (l, dw))| {
            let (mut da, db) = lora_site_grad(&l.a, &l.b, dw);
            if know.variant() == Variant::Hard {
                // A = Â·V_⊥ᵀ  ⇒  ∂L/∂Â = ∂L/∂A·V_⊥
                let basis = &hard.expect("hard adapters carry their parameterisation")[i].basis;
                da = matmul_unchecked(&da, &basis.v_perp);
            }
            SiteGrad {
                site: l.site,
                a: da,
                b: db,
            }
        })
        .collect();
    Ok(LoraGrads { loss, sites })
}

/// CE gradients for the task adapter itself.
pub fn backward_task(base: &BaseWeights, task: &TaskAdapter, batch: &Batch) -> Result<LoraGrads> {
    let deltas = compose(base, Some(task), None, None)?;
    let (loss, dws) = site_gradients(base, deltas, batch)?;
    let sites = task
        .layers
        .iter()
        .zip(&dws)
        .map(|(l, dw)| {
            let (a, b) = lora_site_grad(&l.a, &l.b, dw);
            SiteGrad { site: l.site, a, b }
        })
        .collect();
    Ok(LoraGrads { loss, sites })
}

/// Mean masked CE under `θ₀ + ΔW_T + ΔW_K(know)`.
pub fn eval_loss(
    base: &BaseWeights,
    task: Option<&TaskAdapter>,
    know: Option<&KnowledgeAdapter>,
    batch: &Batch,
) -> Result<f64> {
    batch.validate(&base.config)?;
    let eff = Effective::new(base, compose(base, task, None, know)?)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for e in &batch.examples {
        let rows = e.masked_positions();
        if rows.is_empty() {
            continue;
        }
        let (logits, _) = forward_sequence(base, &eff, &e.tokens, &rows);
        for (r, &t) in rows.iter().enumerate() {
            total += nll_row(logits.row(r), e.targets[t] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(OsdError::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Argmax continuation of `prompt` (which should already start with the
/// beginning-of-sequence token). Stops at `eos` (not emitted), after
/// `max_new` tokens, or at the context limit.
pub fn greedy_decode(
    base: &BaseWeights,
    task: Option<&TaskAdapter>,
    merged: Option<&MergedKnowledge>,
    prompt: &[u32],
    max_new: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    let cfg = &base.config;
    if prompt.is_empty() || prompt.len() >= cfg.max_seq {
        return Err(OsdError::Argument(format!(
            "prompt length {} must be in 1..{}",
            prompt.len(),
            cfg.max_seq
        )));
    }
    if let Some(t) = prompt.iter().find(|t| **t as usize >= cfg.vocab_size) {
        return Err(OsdError::Structural(format!(
            "token id {t} out of vocabulary"
        )));
    }
    let eff = Effective::new(base, compose(base, task, merged, None)?)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < cfg.max_seq {
        let last = seq.len() - 1;
        let (logits, _) = forward_sequence(base, &eff, &seq, &[last]);
        let row = logits.row(0);
        let next = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, v)| {
                if *v > best.1 {
                    (i, *v)
                } else {
                    best
                }
            })
            .0 as u32;
        if next == eos {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
