//! Task instances over a synthetic world and their token encodings.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{entity_name, SyntheticWorld, RELATIONS};
use crate::adapters::TaskType;
use crate::error::{OsdError, Result};
use crate::model::Example;
use crate::training::TrainingSet;

pub const SUPPORTS: &str = "SUPPORTS";
pub const REFUTES: &str = "REFUTES";
pub const SEP: &str = "[SEP]";

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const TEMPLATE_WORDS: [&str; 10] = [
    "the", "of", "is", ".", "what", "?", "verdict", SEP, SUPPORTS, REFUTES,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_type: TaskType,
    pub input: String,
    pub gold: String,
    pub source_doc_ids: Vec<String>,
}

/// Closed whitespace vocabulary: special tokens, template words, every
/// relation word and the first `n_entities` entity names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(n_entities: usize) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .chain(&TEMPLATE_WORDS)
            .chain(&RELATIONS)
            .map(|s| s.to_string())
            .chain((0..n_entities).map(entity_name))
            .collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Whitespace split; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[bos] + input + gold + [eos]`, scoring only `gold + [eos]`.
    pub fn encode_instance(&self, inst: &TaskInstance) -> Example {
        let mut answer = self.encode(&inst.gold);
        answer.push(self.eos());
        Example::from_prompt_answer(self.bos(), &self.encode(&inst.input), &answer)
    }

    /// `[bos] + input`, the decoding prompt.
    pub fn prompt(&self, inst: &TaskInstance) -> Vec<u32> {
        let mut p = vec![self.bos()];
        p.extend(self.encode(&inst.input));
        p
    }
}

fn task_salt(task: TaskType) -> u64 {
    match task {
        TaskType::Qa => 0x9e37_79b9,
        TaskType::FactCheck => 0x85eb_ca6b,
        TaskType::SlotFill => 0xc2b2_ae35,
    }
}

/// A uniformly random object of the same relation other than the true one;
/// falls back to any other entity when the relation has a single object.
fn corrupt_object(
    world: &SyntheticWorld,
    fact: usize,
    by_rel: &[(String, Vec<String>)],
    rng: &mut ChaCha8Rng,
) -> String {
    let f = &world.facts[fact];
    let pool: Vec<&String> = by_rel
        .iter()
        .find(|(r, _)| *r == f.relation)
        .map(|(_, objs)| objs.iter().filter(|o| **o != f.object).collect())
        .unwrap_or_default();
    if !pool.is_empty() {
        return pool[rng.gen_range(0..pool.len())].clone();
    }
    let others: Vec<&String> = world
        .entities
        .iter()
        .filter(|e| **e != f.object && **e != f.subject)
        .collect();
    others[rng.gen_range(0..others.len())].clone()
}

fn objects_by_relation(world: &SyntheticWorld) -> Vec<(String, Vec<String>)> {
    world
        .objects_by_relation()
        .into_iter()
        .map(|(r, objs)| {
            (
                r.to_string(),
                objs.into_iter().map(str::to_string).collect(),
            )
        })
        .collect()
}

fn fact_instance(
    world: &SyntheticWorld,
    fact: usize,
    task: TaskType,
    supports: bool,
    by_rel: &[(String, Vec<String>)],
    rng: &mut ChaCha8Rng,
) -> TaskInstance {
    let f = &world.facts[fact];
    let doc = world.fact_docs()[fact];
    let (input, gold) = match task {
        TaskType::Qa => (
            format!("what is the {} of {} ?", f.relation, f.subject),
            f.object.clone(),
        ),
        TaskType::SlotFill => (
            format!("{} {SEP} {}", f.subject, f.relation),
            f.object.clone(),
        ),
        TaskType::FactCheck => {
            let (object, label) = if supports {
                (f.object.clone(), SUPPORTS)
            } else {
                (corrupt_object(world, fact, by_rel, rng), REFUTES)
            };
            (
                format!(
                    "the {} of {} is {} verdict ?",
                    f.relation, f.subject, object
                ),
                label.to_string(),
            )
        }
    };
    TaskInstance {
        task_type: task,
        input,
        gold,
        source_doc_ids: vec![world.doc_ids[doc].clone()],
    }
}

/// `per_doc` single-source instances per document, ordered round-robin over
/// documents. Fact-check labels alternate within each document, starting
/// with SUPPORTS.
pub fn gen_instances(world: &SyntheticWorld, task: TaskType, per_doc: usize) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ task_salt(task));
    let by_rel = objects_by_relation(world);
    let mut out = Vec::with_capacity(per_doc * world.doc_facts.len());
    for j in 0..per_doc {
        for facts in &world.doc_facts {
            let fact = facts[j % facts.len()];
            out.push(fact_instance(
                world,
                fact,
                task,
                j % 2 == 0,
                &by_rel,
                &mut rng,
            ));
        }
    }
    out
}

/// Up to `n` two-hop questions "what is the r2 of the r1 of s ?" whose two
/// facts live in different documents; both documents are listed as sources.
pub fn gen_multi_source(world: &SyntheticWorld, n: usize) -> Vec<TaskInstance> {
    let lookup = world.lookup();
    let fact_docs = world.fact_docs();
    let mut out = Vec::new();
    'outer: for (i, f1) in world.facts.iter().enumerate() {
        for r2 in &world.relations {
            if out.len() >= n {
                break 'outer;
            }
            let Some(&j) = lookup.get(&(f1.object.as_str(), r2.as_str())) else {
                continue;
            };
            let (d1, d2) = (fact_docs[i], fact_docs[j]);
            if d1 == d2 {
                continue;
            }
            out.push(TaskInstance {
                task_type: TaskType::Qa,
                input: format!(
                    "what is the {r2} of the {} of {} ?",
                    f1.relation, f1.subject
                ),
                gold: world.facts[j].object.clone(),
                source_doc_ids: vec![world.doc_ids[d1].clone(), world.doc_ids[d2].clone()],
            });
            break;
        }
    }
    out
}

/// Knowledge-adapter training data for one document: every fact in task
/// format. Fact checking gets both a supported and a refuted claim per fact.
pub fn doc_training_set(
    world: &SyntheticWorld,
    vocab: &Vocab,
    doc: usize,
    task: TaskType,
) -> Result<TrainingSet> {
    let facts = world
        .doc_facts
        .get(doc)
        .ok_or_else(|| OsdError::Argument(format!("document index {doc} out of range")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ task_salt(task) ^ ((doc as u64) << 20));
    let by_rel = objects_by_relation(world);
    let mut examples = Vec::new();
    for &f in facts {
        examples
            .push(vocab.encode_instance(&fact_instance(world, f, task, true, &by_rel, &mut rng)));
        if task == TaskType::FactCheck {
            examples.push(
                vocab.encode_instance(&fact_instance(world, f, task, false, &by_rel, &mut rng)),
            );
        }
    }
    Ok(TrainingSet {
        task_type: task,
        examples,
    })
}

/// Encoded instances as a training set.
pub fn instances_training_set(
    vocab: &Vocab,
    task: TaskType,
    instances: &[TaskInstance],
) -> TrainingSet {
    TrainingSet {
        task_type: task,
        examples: instances.iter().map(|i| vocab.encode_instance(i)).collect(),
    }
}
