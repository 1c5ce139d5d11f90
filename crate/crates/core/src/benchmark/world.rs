//! Closed synthetic knowledge world: entities, relations, one object per
//! (subject, relation), facts dealt into short templated documents.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OsdError, Result};
use crate::retrieval::Document;

/// Relation words; a world uses a prefix of this list.
pub const RELATIONS: [&str; 12] = [
    "capital",
    "founder",
    "rival",
    "mentor",
    "neighbor",
    "ally",
    "creator",
    "leader",
    "partner",
    "successor",
    "sponsor",
    "guardian",
];

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th",
];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 8] = ["n", "r", "l", "k", "m", "s", "x", "v"];

/// Maximum number of distinct entity names.
pub const MAX_ENTITIES: usize = ONSETS.len() * NUCLEI.len() * CODAS.len() * NUCLEI.len();

pub const MIN_FACTS_PER_DOC: usize = 3;
pub const MAX_FACTS_PER_DOC: usize = 6;

/// Name of entity `i`: a fixed two-syllable pronounceable word. Names depend
/// on the index only, so every world shares one closed vocabulary.
pub fn entity_name(i: usize) -> String {
    let mut r = i;
    let mut take = |n: usize| {
        let v = r % n;
        r /= n;
        v
    };
    let (o, n1, c, n2) = (
        take(ONSETS.len()),
        take(NUCLEI.len()),
        take(CODAS.len()),
        take(NUCLEI.len()),
    );
    format!(
        "{}{}{}{}{}",
        ONSETS[o],
        NUCLEI[n1],
        CODAS[c],
        ONSETS[(o + 7) % ONSETS.len()],
        NUCLEI[n2]
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_docs: usize,
    /// Index of the first entity name, so disjoint worlds can share the
    /// vocabulary.
    pub entity_offset: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 150,
            n_relations: 8,
            n_docs: 200,
            entity_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!(
            "the {} of {} is {} .",
            self.relation, self.subject, self.object
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub facts: Vec<Fact>,
    /// Fact indices of each document, in document order.
    pub doc_facts: Vec<Vec<usize>>,
    pub doc_ids: Vec<String>,
}

impl SyntheticWorld {
    pub fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id)
    }

    /// Document holding each fact.
    pub fn fact_docs(&self) -> Vec<usize> {
        let mut out = vec![0; self.facts.len()];
        for (d, fs) in self.doc_facts.iter().enumerate() {
            for &f in fs {
                out[f] = d;
            }
        }
        out
    }

    /// `(subject, relation) → fact index`.
    pub fn lookup(&self) -> HashMap<(&str, &str), usize> {
        self.facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.subject.as_str(), f.relation.as_str()), i))
            .collect()
    }

    /// Objects seen per relation, sorted and deduplicated.
    pub fn objects_by_relation(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for f in &self.facts {
            out.entry(f.relation.as_str())
                .or_default()
                .push(f.object.as_str());
        }
        for v in out.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        out
    }
}

/// SHA-256 over `id \t text \n` records.
pub fn corpus_hash(corpus: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in corpus {
        h.update(d.doc_id.as_bytes());
        h.update(b"\t");
        h.update(d.text.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Deterministic world and its rendered corpus.
pub fn gen_world(seed: u64, config: &WorldConfig) -> Result<(SyntheticWorld, Vec<Document>)> {
    let WorldConfig {
        n_entities,
        n_relations,
        n_docs,
        entity_offset,
    } = *config;
    if n_entities < 2 || n_relations == 0 || n_docs == 0 {
        return Err(OsdError::Argument(
            "need at least 2 entities, 1 relation and 1 document".into(),
        ));
    }
    if n_relations > RELATIONS.len() {
        return Err(OsdError::Argument(format!(
            "at most {} relations are available",
            RELATIONS.len()
        )));
    }
    if entity_offset + n_entities > MAX_ENTITIES {
        return Err(OsdError::Argument(format!(
            "entity range {entity_offset}..{} exceeds the {MAX_ENTITIES} available names",
            entity_offset + n_entities
        )));
    }
    let capacity = n_entities * n_relations;
    let minimum = n_docs * MIN_FACTS_PER_DOC;
    if minimum > capacity {
        return Err(OsdError::Capacity {
            requested: minimum,
            capacity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (entity_offset..entity_offset + n_entities)
        .map(entity_name)
        .collect();
    let relations: Vec<String> = RELATIONS[..n_relations]
        .iter()
        .map(|r| r.to_string())
        .collect();

    let mut sizes: Vec<usize> = (0..n_docs)
        .map(|_| rng.gen_range(MIN_FACTS_PER_DOC..=MAX_FACTS_PER_DOC))
        .collect();
    // Trim the largest documents until the facts fit.
    while sizes.iter().sum::<usize>() > capacity {
        let i = (0..n_docs)
            .max_by_key(|&i| (sizes[i], std::cmp::Reverse(i)))
            .expect("n_docs ≥ 1");
        sizes[i] -= 1;
    }
    let total: usize = sizes.iter().sum();

    // Subject-major enumeration keeps each document about a few subjects.
    let mut subjects: Vec<usize> = (0..n_entities).collect();
    subjects.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(capacity);
    for &s in &subjects {
        let mut rels: Vec<usize> = (0..n_relations).collect();
        rels.shuffle(&mut rng);
        pairs.extend(rels.into_iter().map(|r| (s, r)));
    }
    let facts: Vec<Fact> = pairs[..total]
        .iter()
        .map(|&(s, r)| {
            let mut o = rng.gen_range(0..n_entities - 1);
            if o >= s {
                o += 1;
            }
            Fact {
                subject: entities[s].clone(),
                relation: relations[r].clone(),
                object: entities[o].clone(),
            }
        })
        .collect();

    let mut doc_facts = Vec::with_capacity(n_docs);
    let mut next = 0;
    for size in sizes {
        doc_facts.push((next..next + size).collect::<Vec<_>>());
        next += size;
    }
    let doc_ids: Vec<String> = (0..n_docs).map(|d| format!("doc{d:04}")).collect();
    let corpus = doc_ids
        .iter()
        .zip(&doc_facts)
        .map(|(id, fs)| {
            let text = fs
                .iter()
                .map(|&f| facts[f].sentence())
                .collect::<Vec<_>>()
                .join(" ");
            Document::new(id.clone(), text)
        })
        .collect::<Result<Vec<_>>>()?;
    let world = SyntheticWorld {
        seed,
        entities,
        relations,
        facts,
        doc_facts,
        doc_ids,
    };
    Ok((world, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn entity_names_are_unique_single_words() {
        let names: HashSet<String> = (0..MAX_ENTITIES).map(entity_name).collect();
        assert_eq!(names.len(), MAX_ENTITIES);
        assert!(names
            .iter()
            .all(|n| n.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = WorldConfig::default();
        let (_, a) = gen_world(3, &cfg).unwrap();
        let (_, b) = gen_world(3, &cfg).unwrap();
        let (_, c) = gen_world(4, &cfg).unwrap();
        assert_eq!(corpus_hash(&a), corpus_hash(&b));
        assert_ne!(corpus_hash(&a), corpus_hash(&c));
    }

    #[test]
    fn distinct_seeds_assign_facts_differently() {
        let cfg = WorldConfig::default();
        let (a, _) = gen_world(1, &cfg).unwrap();
        let (b, _) = gen_world(2, &cfg).unwrap();
        assert_ne!(a.facts, b.facts);
    }

    #[test]
    fn single_document_holds_every_fact() {
        let cfg = WorldConfig {
            n_entities: 5,
            n_relations: 2,
            n_docs: 1,
            entity_offset: 0,
        };
        let (w, corpus) = gen_world(0, &cfg).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(w.doc_facts[0].len(), w.facts.len());
    }

    #[test]
    fn subject_relation_pairs_are_unique_across_documents() {
        let (w, _) = gen_world(9, &WorldConfig::default()).unwrap();
        let mut owner: HashMap<(&str, &str), usize> = HashMap::new();
        for (d, fs) in w.doc_facts.iter().enumerate() {
            assert!((MIN_FACTS_PER_DOC..=MAX_FACTS_PER_DOC).contains(&fs.len()));
            for &f in fs {
                let key = (w.facts[f].subject.as_str(), w.facts[f].relation.as_str());
                assert!(owner.insert(key, d).is_none(), "{key:?} appears twice");
            }
        }
        let mut seen: Vec<usize> = w.doc_facts.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..w.facts.len()).collect::<Vec<_>>());
        assert!(w.facts.iter().all(|f| f.subject != f.object));
    }

    #[test]
    fn capacity_is_enforced() {
        let cfg = WorldConfig {
            n_entities: 2,
            n_relations: 1,
            n_docs: 1,
            entity_offset: 0,
        };
        assert_eq!(
            gen_world(0, &cfg).unwrap_err(),
            OsdError::Capacity {
                requested: 3,
                capacity: 2
            }
        );
        // fits only after trimming documents to the minimum size
        let cfg = WorldConfig {
            n_entities: 3,
            n_relations: 2,
            n_docs: 2,
            entity_offset: 0,
        };
        let (w, _) = gen_world(0, &cfg).unwrap();
        assert_eq!(w.facts.len(), 6);
    }

    #[test]
    fn documents_render_their_facts() {
        let (w, corpus) = gen_world(5, &WorldConfig::default()).unwrap();
        for (d, doc) in corpus.iter().enumerate() {
            for &f in &w.doc_facts[d] {
                assert!(doc.text.contains(&w.facts[f].sentence()));
            }
        }
    }
}
