//! Retrieval-depth sweep: retrieve top-K documents, merge their knowledge
//! adapters, decode greedily and score against the gold answer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::instances::{TaskInstance, Vocab};
use super::metrics::task_metric;
use crate::adapters::{
    merge, score_weights, uniform_weights, KnowledgeAdapter, TaskAdapter, TaskType, Variant,
};
use crate::error::{OsdError, Result};
use crate::model::{greedy_decode, BaseWeights};
use crate::retrieval::InvertedIndex;

/// An evaluated system: the bare base model, or merged knowledge adapters
/// of one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoAdapter,
    Entangled,
    Soft,
    Hard,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NoAdapter,
        Method::Entangled,
        Method::Soft,
        Method::Hard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoAdapter => "no_adapter",
            Method::Entangled => "entangled",
            Method::Soft => "soft",
            Method::Hard => "hard",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::NoAdapter => None,
            Method::Entangled => Some(Variant::Entangled),
            Method::Soft => Some(Variant::Soft),
            Method::Hard => Some(Variant::Hard),
        }
    }

    /// Whether the task adapter is composed in at inference.
    pub fn uses_task_adapter(self) -> bool {
        matches!(self, Method::Soft | Method::Hard)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| OsdError::Argument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// Retrieval scores normalized to sum to one.
    Score,
}

impl FromStr for WeightMode {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightMode::Uniform),
            "score" => Ok(WeightMode::Score),
            _ => Err(OsdError::Argument(format!("unknown weight mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retriever {
    Bm25,
    /// Gold source documents first, then BM25 results.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub weight_mode: WeightMode,
    /// Only the first `n_eval` instances are scored.
    pub n_eval: usize,
    pub max_new_tokens: usize,
    /// Depths at which the oracle retriever is also evaluated.
    pub oracle_k: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 3, 5, 7, 10],
            methods: Method::ALL.to_vec(),
            weight_mode: WeightMode::Uniform,
            n_eval: 300,
            max_new_tokens: 4,
            oracle_k: vec![1],
        }
    }
}

/// Everything one (task, seed) sweep reads. Adapters are looked up by
/// variant and document id.
pub struct SweepInputs<'a> {
    pub base: &'a BaseWeights,
    pub vocab: &'a Vocab,
    pub index: &'a InvertedIndex,
    pub instances: &'a [TaskInstance],
    pub task_type: TaskType,
    pub task: Option<&'a TaskAdapter>,
    pub knowledge: &'a HashMap<Variant, HashMap<String, KnowledgeAdapter>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Method name, suffixed `@oracle` for oracle retrieval.
    pub method: String,
    pub k: usize,
    pub seed: u64,
    /// `{task}.{f1|accuracy}`.
    pub metric: String,
    pub value: Option<f64>,
    pub n_instances: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub metric: String,
    /// Seed-mean metric per K, in `k_list` order; `None` when every seed
    /// failed at that depth.
    pub mean_by_k: Vec<(usize, Option<f64>)>,
    pub best_k: Option<usize>,
    /// Seed-mean at the best K minus seed-mean at the largest K.
    pub degradation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSweepReport {
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<MethodSummary>,
    /// Whether the no-adapter control is constant across K for every seed
    /// and metric; `None` when the control was not run.
    pub control_flat: Option<bool>,
    /// Trend expectations that did not hold.
    pub warnings: Vec<String>,
}

fn oracle_name(method: Method) -> String {
    format!("{}@oracle", method.as_str())
}

/// Document ids retrieved for `inst` at depth `k`, with their scores.
fn retrieve(
    index: &InvertedIndex,
    inst: &TaskInstance,
    k: usize,
    retriever: Retriever,
) -> Result<Vec<(String, f64)>> {
    let hits = index.top_k(
        &inst.input,
        k.max(inst.source_doc_ids.len()) + inst.source_doc_ids.len(),
    )?;
    let mut out: Vec<(String, f64)> = Vec::with_capacity(k);
    if retriever == Retriever::Oracle {
        for src in &inst.source_doc_ids {
            let score = hits
                .iter()
                .find(|h| &h.doc_id == src)
                .map_or(0.0, |h| h.score);
            out.push((src.clone(), score));
        }
    }
    for h in hits {
        if out.len() >= k {
            break;
        }
        if !out.iter().any(|(d, _)| *d == h.doc_id) {
            out.push((h.doc_id, h.score));
        }
    }
    out.truncate(k);
    Ok(out)
}

fn score_instance(
    inputs: &SweepInputs<'_>,
    config: &SweepConfig,
    method: Method,
    k: usize,
    retriever: Retriever,
    inst: &TaskInstance,
) -> Result<f64> {
    let (_, scorer) = task_metric(inst.task_type);
    let prompt = inputs.vocab.prompt(inst);
    let eos = inputs.vocab.eos();
    let out = match method.variant() {
        None => greedy_decode(inputs.base, None, None, &prompt, config.max_new_tokens, eos)?,
        Some(variant) => {
            let retrieved = retrieve(inputs.index, inst, k, retriever)?;
            let pool = inputs.knowledge.get(&variant);
            let adapters = retrieved
                .iter()
                .map(|(d, _)| {
                    pool.and_then(|p| p.get(d))
                        .ok_or_else(|| OsdError::MissingAdapter(format!("{variant}/{d}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let weights = match config.weight_mode {
                WeightMode::Uniform => uniform_weights(adapters.len())?,
                WeightMode::Score => {
                    score_weights(&retrieved.iter().map(|(_, s)| *s).collect::<Vec<_>>())?
                }
            };
            let merged = merge(&adapters, &weights)?;
            let task = if method.uses_task_adapter() {
                Some(inputs.task.ok_or_else(|| {
                    OsdError::MissingAdapter(format!("task/{}", inputs.task_type))
                })?)
            } else {
                None
            };
            greedy_decode(
                inputs.base,
                task,
                Some(&merged),
                &prompt,
                config.max_new_tokens,
                eos,
            )?
        }
    };
    Ok(scorer(&inputs.vocab.decode(&out), &inst.gold))
}

fn run_cell(
    inputs: &SweepInputs<'_>,
    config: &SweepConfig,
    method: Method,
    k: usize,
    retriever: Retriever,
) -> SweepCell {
    let instances: Vec<&TaskInstance> = inputs
        .instances
        .iter()
        .filter(|i| i.task_type == inputs.task_type)
        .take(config.n_eval)
        .collect();
    let scores: Result<Vec<f64>> = instances
        .par_iter()
        .map(|inst| score_instance(inputs, config, method, k, retriever, inst))
        .collect();
    let (value, error) = match scores {
        Ok(s) if s.is_empty() => (None, Some("no instances to evaluate".to_string())),
        Ok(s) => (Some(s.iter().sum::<f64>() / s.len() as f64), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SweepCell {
        method: match retriever {
            Retriever::Bm25 => method.as_str().to_string(),
            Retriever::Oracle => oracle_name(method),
        },
        k,
        seed: inputs.seed,
        metric: format!("{}.{}", inputs.task_type, task_metric(inputs.task_type).0),
        value,
        n_instances: instances.len(),
        error,
    }
}

/// Cells for one task and seed: every method at every K, plus oracle
/// retrieval for adapter methods at `oracle_k`. Failures are recorded in
/// the cell and the sweep continues.
pub fn sweep_cells(inputs: &SweepInputs<'_>, config: &SweepConfig) -> Result<Vec<SweepCell>> {
    if config.k_list.is_empty() || config.k_list.contains(&0) {
        return Err(OsdError::Argument(
            "K list must be non-empty with every K ≥ 1".into(),
        ));
    }
    let mut cells = Vec::new();
    for &method in &config.methods {
        for &k in &config.k_list {
            cells.push(run_cell(inputs, config, method, k, Retriever::Bm25));
        }
        if method.variant().is_some() {
            for &k in &config.oracle_k {
                cells.push(run_cell(inputs, config, method, k, Retriever::Oracle));
            }
        }
    }
    Ok(cells)
}

/// Single-seed sweep report.
pub fn run_depth_sweep(inputs: &SweepInputs<'_>, config: &SweepConfig) -> Result<DepthSweepReport> {
    let cells = sweep_cells(inputs, config)?;
    Ok(DepthSweepReport::from_cells(config, cells))
}

impl DepthSweepReport {
    /// Assembles cells from any number of seeds and tasks and derives the
    /// seed-mean summary and trend checks.
    pub fn from_cells(config: &SweepConfig, cells: Vec<SweepCell>) -> Self {
        let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut methods: Vec<String> = Vec::new();
        for c in &cells {
            if !methods.contains(&c.method) {
                methods.push(c.method.clone());
            }
        }
        let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for c in &cells {
            let entry = groups
                .entry((c.method.clone(), c.metric.clone()))
                .or_default();
            let slot = entry.entry(c.k).or_default();
            if let Some(v) = c.value {
                slot.push(v);
            }
        }
        let max_k = config.k_list.iter().copied().max().unwrap_or(0);
        let mut summary = Vec::new();
        for method in &methods {
            for ((m, metric), by_k) in &groups {
                if m != method {
                    continue;
                }
                let mean_by_k: Vec<(usize, Option<f64>)> = by_k
                    .iter()
                    .map(|(&k, vals)| {
                        (
                            k,
                            (!vals.is_empty())
                                .then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                        )
                    })
                    .collect();
                let best = mean_by_k
                    .iter()
                    .filter_map(|&(k, v)| v.map(|v| (k, v)))
                    .fold(None::<(usize, f64)>, |acc, (k, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((k, v)),
                    });
                let at_max = mean_by_k
                    .iter()
                    .find(|(k, _)| *k == max_k)
                    .and_then(|(_, v)| *v);
                let degradation = match (best, at_max) {
                    (Some((_, b)), Some(last)) if by_k.len() > 1 => Some(b - last),
                    _ => None,
                };
                summary.push(MethodSummary {
                    method: method.clone(),
                    metric: metric.clone(),
                    mean_by_k,
                    best_k: best.map(|(k, _)| k),
                    degradation,
                });
            }
        }

        let mut warnings = Vec::new();
        let control: Vec<&SweepCell> = cells
            .iter()
            .filter(|c| c.method == Method::NoAdapter.as_str())
            .collect();
        let control_flat = (!control.is_empty()).then(|| {
            control.iter().all(|c| {
                control
                    .iter()
                    .filter(|o| o.seed == c.seed && o.metric == c.metric)
                    .all(|o| o.value.map(f64::to_bits) == c.value.map(f64::to_bits))
            })
        });
        if control_flat == Some(false) {
            warnings.push("no_adapter control varies with K".to_string());
        }
        let find = |method: &str, metric: &str| {
            summary
                .iter()
                .find(|s| s.method == method && s.metric == metric)
        };
        for s in summary.iter().filter(|s| s.method == Method::Soft.as_str()) {
            if let (Some(soft), Some(ent)) = (
                s.degradation,
                find(Method::Entangled.as_str(), &s.metric).and_then(|e| e.degradation),
            ) {
                if soft >= ent {
                    warnings.push(format!(
                        "trend: soft degrades by {soft:.4} from best K to K={max_k} on {}, not less than entangled ({ent:.4})",
                        s.metric
                    ));
                }
            }
        }
        for s in summary.iter().filter(|s| s.method.ends_with("@oracle")) {
            let plain = s.method.trim_end_matches("@oracle");
            for &(k, oracle) in &s.mean_by_k {
                let bm25 = find(plain, &s.metric)
                    .and_then(|p| p.mean_by_k.iter().find(|(pk, _)| *pk == k))
                    .and_then(|(_, v)| *v);
                if let (Some(o), Some(b)) = (oracle, bm25) {
                    if o < b {
                        warnings.push(format!(
                            "oracle ceiling: {plain} at K={k} scores {o:.4} with the gold document forced, below BM25 ({b:.4}) on {}",
                            s.metric
                        ));
                    }
                }
            }
        }
        Self {
            k_list: config.k_list.clone(),
            seeds,
            methods,
            cells,
            summary,
            control_flat,
            warnings,
        }
    }

    /// `method,K,seed,metric,value`; failed cells carry `failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,K,seed,metric,value\n");
        for c in &self.cells {
            let value = c
                .value
                .map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.method, c.k, c.seed, c.metric, value
            ));
        }
        out
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.value.is_none()).count()
    }
}
