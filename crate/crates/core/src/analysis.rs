//! Cosine-similarity geometry of document adapters: relevant vs irrelevant
//! document pairs, per variant and per flattened matrix side.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{flatten, FlattenKind, KnowledgeAdapter, Variant};
use crate::benchmark::TaskInstance;
use crate::error::{OsdError, Result};
use crate::linalg::cosine;

pub const BIN_WIDTH: f64 = 0.05;
pub const N_BINS: usize = 40;

/// How relevant pairs are defined; written into every report.
pub const PAIR_DEFINITION: &str =
    "relevant = two documents listed together as sources of one instance; irrelevant = seeded random pairs never co-listed";

/// Hard-variant class means must lie within this distance of zero.
pub const HARD_CENTER_TOLERANCE: f64 = 0.15;

/// Unordered document pairs stored as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub relevant: Vec<(String, String)>,
    pub irrelevant: Vec<(String, String)>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Relevant pairs from co-sourced instances; `n_irrelevant` seeded pairs
/// from the remaining pairs over every document that appears as a source
/// (fewer when not enough exist).
pub fn collect_pairs(
    instances: &[TaskInstance],
    n_irrelevant: usize,
    seed: u64,
) -> Result<PairSet> {
    let mut relevant: BTreeSet<(String, String)> = BTreeSet::new();
    let mut docs: BTreeSet<&str> = BTreeSet::new();
    for inst in instances {
        docs.extend(inst.source_doc_ids.iter().map(String::as_str));
        for (i, a) in inst.source_doc_ids.iter().enumerate() {
            for b in &inst.source_doc_ids[i + 1..] {
                if a != b {
                    relevant.insert(ordered(a, b));
                }
            }
        }
    }
    if relevant.is_empty() {
        return Err(OsdError::EmptyRelevant);
    }
    let docs: Vec<&str> = docs.into_iter().collect();
    let mut candidates = Vec::new();
    for (i, a) in docs.iter().enumerate() {
        for b in &docs[i + 1..] {
            let p = ordered(a, b);
            if !relevant.contains(&p) {
                candidates.push(p);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(n_irrelevant);
    candidates.sort();
    Ok(PairSet {
        relevant: relevant.into_iter().collect(),
        irrelevant: candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// One cosine per pair, in pair order.
    pub cosines: Vec<f64>,
    pub mean: Option<f64>,
    /// Counts over `N_BINS` bins of width `BIN_WIDTH` from −1 to 1; the last
    /// bin is closed on the right.
    pub histogram: Vec<usize>,
}

impl ClassStats {
    fn new(cosines: Vec<f64>) -> Self {
        let mut histogram = vec![0; N_BINS];
        for &c in &cosines {
            histogram[bin_index(c)] += 1;
        }
        let mean =
            (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
        Self {
            cosines,
            mean,
            histogram,
        }
    }
}

pub fn bin_edges() -> Vec<f64> {
    (0..=N_BINS).map(|i| -1.0 + i as f64 * BIN_WIDTH).collect()
}

/// Bin holding `c ∈ [−1, 1]`.
pub fn bin_index(c: f64) -> usize {
    let edges = bin_edges();
    (0..N_BINS).rev().find(|&i| c >= edges[i]).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySection {
    pub variant: Variant,
    pub kind: FlattenKind,
    pub relevant: ClassStats,
    pub irrelevant: ClassStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pair_definition: String,
    pub bin_edges: Vec<f64>,
    pub sections: Vec<SimilaritySection>,
    /// Trend expectations that did not hold.
    pub warnings: Vec<String>,
}

fn class_cosines(
    adapters: &HashMap<String, KnowledgeAdapter>,
    pairs: &[(String, String)],
    kind: FlattenKind,
) -> Result<Vec<f64>> {
    let get = |d: &String| {
        adapters
            .get(d)
            .ok_or_else(|| OsdError::MissingAdapter(d.clone()))
    };
    pairs
        .par_iter()
        .map(|(a, b)| cosine(&flatten(get(a)?, kind), &flatten(get(b)?, kind)))
        .collect()
}

/// Cosine distributions for one variant's adapters.
pub fn similarity_report(
    variant: Variant,
    adapters: &HashMap<String, KnowledgeAdapter>,
    pairs: &PairSet,
    kinds: &[FlattenKind],
) -> Result<SimilarityReport> {
    let mut sections = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        sections.push(SimilaritySection {
            variant,
            kind,
            relevant: ClassStats::new(class_cosines(adapters, &pairs.relevant, kind)?),
            irrelevant: ClassStats::new(class_cosines(adapters, &pairs.irrelevant, kind)?),
        });
    }
    let mut report = SimilarityReport {
        pair_definition: PAIR_DEFINITION.to_string(),
        bin_edges: bin_edges(),
        sections,
        warnings: Vec::new(),
    };
    report.warnings = trend_warnings(&report.sections);
    Ok(report)
}

fn trend_warnings(sections: &[SimilaritySection]) -> Vec<String> {
    let mut warnings = Vec::new();
    for s in sections {
        let (Some(rel), Some(irr)) = (s.relevant.mean, s.irrelevant.mean) else {
            continue;
        };
        match s.variant {
            Variant::Soft if rel <= irr => warnings.push(format!(
                "trend: soft {} relevant mean {rel:.4} is not above irrelevant mean {irr:.4}",
                s.kind.as_str()
            )),
            Variant::Hard if rel.abs() > HARD_CENTER_TOLERANCE || irr.abs() > HARD_CENTER_TOLERANCE => warnings.push(format!(
                "trend: hard {} class means {rel:.4} / {irr:.4} are not within ±{HARD_CENTER_TOLERANCE} of zero",
                s.kind.as_str()
            )),
            _ => {}
        }
    }
    warnings
}

impl SimilarityReport {
    /// Concatenates per-variant reports.
    pub fn combine(reports: Vec<SimilarityReport>) -> SimilarityReport {
        let sections: Vec<SimilaritySection> =
            reports.into_iter().flat_map(|r| r.sections).collect();
        SimilarityReport {
            pair_definition: PAIR_DEFINITION.to_string(),
            bin_edges: bin_edges(),
            warnings: trend_warnings(&sections),
            sections,
        }
    }

    /// `variant,kind,class,bin_low,bin_high,count`.
    pub fn histogram_csv(&self) -> String {
        let edges = &self.bin_edges;
        let mut out = format!(
            "# {}\nvariant,kind,class,bin_low,bin_high,count\n",
            self.pair_definition
        );
        for s in &self.sections {
            for (class, stats) in [("relevant", &s.relevant), ("irrelevant", &s.irrelevant)] {
                for (i, count) in stats.histogram.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{class},{:.2},{:.2},{count}\n",
                        s.variant,
                        s.kind.as_str(),
                        edges[i],
                        edges[i + 1]
                    ));
                }
            }
        }
        out
    }

    /// Class means and counts per section, without the raw cosines.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "pair_definition": self.pair_definition,
            "sections": self.sections.iter().map(|s| serde_json::json!({
                "variant": s.variant,
                "kind": s.kind,
                "relevant_mean": s.relevant.mean,
                "irrelevant_mean": s.irrelevant.mean,
                "relevant_count": s.relevant.cosines.len(),
                "irrelevant_count": s.irrelevant.cosines.len(),
            })).collect::<Vec<_>>(),
            "warnings": self.warnings,
        })
    }
}
