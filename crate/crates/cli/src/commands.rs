//! Pipeline stages. Each command reads its inputs from the output
//! directory, writes its artifacts atomically and returns a summary.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use osd_core::analysis::{collect_pairs, similarity_report, PairSet, SimilarityReport};
use osd_core::benchmark::{
    corpus_hash, doc_training_set, gen_instances, gen_multi_source, gen_world,
    instances_training_set, sweep_cells, DepthSweepReport, SweepCell, SweepInputs, SyntheticWorld,
    TaskInstance,
};
use osd_core::linalg::NullSpaceBasis;
use osd_core::model::init_base;
use osd_core::retrieval::{build_index, Document, DocumentRecord, InvertedIndex};
use osd_core::training::{
    derive_seed, precompute_bases, train_knowledge, train_task, TrainConfig, TrainReport,
};
use osd_core::{BaseWeights, KnowledgeAdapter, OsdError, TaskAdapter, TaskType, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Provenance};
use crate::config::RunConfig;
use crate::io::{read_json, read_jsonl, write_json, write_jsonl, write_text};

/// Largest per-site `max|A_K·A_Tᵀ|` a hard adapter may show on reload.
pub const HARD_AUDIT_TOLERANCE: f64 = 1e-10;

/// File locations under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn task_world(&self) -> PathBuf {
        self.root.join("task_world.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.tsv")
    }
    pub fn instances(&self, task: TaskType) -> PathBuf {
        self.root.join("instances").join(format!("{task}.jsonl"))
    }
    pub fn task_corpus(&self, task: TaskType) -> PathBuf {
        self.root.join("task_corpus").join(format!("{task}.jsonl"))
    }
    pub fn replicate(&self, replicate: u64) -> PathBuf {
        self.root.join("adapters").join(format!("seed-{replicate}"))
    }
    pub fn task_checkpoint(&self, replicate: u64, task: TaskType) -> PathBuf {
        self.replicate(replicate)
            .join("task")
            .join(format!("{task}.osda"))
    }
    pub fn knowledge_checkpoint(
        &self,
        replicate: u64,
        variant: Variant,
        task: TaskType,
        doc_id: &str,
    ) -> PathBuf {
        self.replicate(replicate)
            .join(variant.as_str())
            .join(task.as_str())
            .join(format!("{doc_id}.osda"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// `foo.osda` → `foo.report.json`.
pub fn report_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("report.json")
}

fn hash_json(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Runs `f` on a pool of `jobs` threads (0 = one per core).
fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.resolved.toml"), &config.to_toml())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelRecord {
    config: osd_core::ModelConfig,
    content_hash: String,
}

/// Everything later stages read back from `gen`'s output.
pub struct Inputs {
    pub world: SyntheticWorld,
    pub corpus: Vec<Document>,
    pub vocab: osd_core::benchmark::Vocab,
    pub base: BaseWeights,
    pub base_hash: String,
}

fn missing(path: &Path) -> anyhow::Error {
    anyhow!("{} is missing; run `osd gen` first", path.display())
}

pub fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    let layout = Layout::new(&config.out_dir);
    for p in [layout.world(), layout.corpus(), layout.model()] {
        if !p.exists() {
            return Err(missing(&p));
        }
    }
    let world: SyntheticWorld = read_json(&layout.world())?;
    let records: Vec<DocumentRecord> = read_jsonl(&layout.corpus())?;
    let corpus = records
        .into_iter()
        .map(|r| Document::new(r.id, r.text))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let base = init_base(&config.model)?;
    let base_hash = base.content_hash();
    let recorded: ModelRecord = read_json(&layout.model())?;
    if recorded.content_hash != base_hash {
        bail!(
            "{} records base model {} but the configuration builds {base_hash}; rerun `osd gen`",
            layout.model().display(),
            recorded.content_hash
        );
    }
    Ok(Inputs {
        world,
        corpus,
        vocab: config.world.vocab(),
        base,
        base_hash,
    })
}

fn load_instances(layout: &Layout, task: TaskType) -> Result<Vec<TaskInstance>> {
    let path = layout.instances(task);
    if !path.exists() {
        return Err(missing(&path));
    }
    read_jsonl(&path)
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub n_docs: usize,
    pub n_facts: usize,
    pub n_task_docs: usize,
    pub instances: Vec<(TaskType, usize)>,
    pub corpus_hash: String,
    pub base_hash: String,
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "documents: {}", self.n_docs)?;
        writeln!(f, "facts: {}", self.n_facts)?;
        writeln!(f, "task-world documents: {}", self.n_task_docs)?;
        for (task, n) in &self.instances {
            writeln!(f, "instances[{task}]: {n}")?;
        }
        writeln!(f, "base model hash: {}", self.base_hash)?;
        write!(f, "corpus hash: {}", self.corpus_hash)
    }
}

pub fn cmd_gen(config: &RunConfig) -> Result<GenSummary> {
    let layout = Layout::new(&config.out_dir);
    let (world, corpus) = gen_world(
        derive_seed(config.seed, &["world"]),
        &config.world.eval_world(),
    )?;
    let (task_world, _) = gen_world(
        derive_seed(config.seed, &["task_world"]),
        &config.world.task_world(),
    )?;
    let vocab = config.world.vocab();
    let base = init_base(&config.model)?;
    let base_hash = base.content_hash();

    echo_config(config, &layout.root)?;
    write_json(&layout.world(), &world)?;
    write_json(&layout.task_world(), &task_world)?;
    write_jsonl(
        &layout.corpus(),
        &corpus.iter().map(DocumentRecord::from).collect::<Vec<_>>(),
    )?;
    write_json(&layout.vocab(), vocab.tokens())?;
    write_json(
        &layout.model(),
        &ModelRecord {
            config: config.model.clone(),
            content_hash: base_hash.clone(),
        },
    )?;
    let mut instances = Vec::new();
    for &task in &config.world.tasks {
        let mut eval = gen_instances(&world, task, config.world.per_doc);
        if task == TaskType::Qa {
            eval.extend(gen_multi_source(&world, config.world.multi_source));
        }
        write_jsonl(&layout.instances(task), &eval)?;
        write_jsonl(
            &layout.task_corpus(task),
            &gen_instances(&task_world, task, config.world.per_doc),
        )?;
        instances.push((task, eval.len()));
    }
    Ok(GenSummary {
        n_docs: corpus.len(),
        n_facts: world.facts.len(),
        n_task_docs: task_world.doc_ids.len(),
        instances,
        corpus_hash: corpus_hash(&corpus),
        base_hash,
    })
}

// ---------------------------------------------------------------- index

pub fn build_corpus_index(config: &RunConfig, corpus: &[Document]) -> Result<InvertedIndex> {
    Ok(build_index(corpus, config.retrieval)?)
}

/// Builds the BM25 index and writes its flat dump; returns the term count.
pub fn cmd_index(config: &RunConfig) -> Result<usize> {
    let layout = Layout::new(&config.out_dir);
    if !layout.corpus().exists() {
        return Err(missing(&layout.corpus()));
    }
    let records: Vec<DocumentRecord> = read_jsonl(&layout.corpus())?;
    let corpus = records
        .into_iter()
        .map(|r| Document::new(r.id, r.text))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let index = build_corpus_index(config, &corpus)?;
    let mut buf = Vec::new();
    index.dump(&mut buf)?;
    crate::io::atomic_write(&layout.index(), &buf)?;
    Ok(index.terms().count())
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrainSummary {
    pub trained: usize,
    pub reused: usize,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} adapters, reused {} existing checkpoints",
            self.trained, self.reused
        )
    }
}

fn task_fingerprint(
    base_hash: &str,
    task: TaskType,
    train: &TrainConfig,
    corpus: &[TaskInstance],
) -> String {
    hash_json(&json!({
        "kind": "task",
        "task_type": task,
        "base_hash": base_hash,
        "train": train,
        "corpus": corpus,
    }))
}

/// An existing checkpoint is reused when it loads cleanly and records the
/// same fingerprint.
fn reusable(path: &Path, fingerprint: &str) -> Option<checkpoint::Checkpoint> {
    if !path.exists() {
        return None;
    }
    match checkpoint::load(path) {
        Ok(c) if c.header.fingerprint == fingerprint => Some(c),
        Ok(_) => {
            info!("{} is stale; retraining", path.display());
            None
        }
        Err(e) => {
            warn!("{} is unreadable ({e}); retraining", path.display());
            None
        }
    }
}

fn write_report(checkpoint_path: &Path, report: &TrainReport) -> Result<()> {
    write_json(&report_path(checkpoint_path), report)
}

pub fn cmd_train_task(config: &RunConfig) -> Result<TrainSummary> {
    let layout = Layout::new(&config.out_dir);
    let inputs = load_inputs(config)?;
    echo_config(config, &layout.root)?;
    let mut jobs = Vec::new();
    for &replicate in &config.seeds {
        for &task in &config.world.tasks {
            jobs.push((replicate, task));
        }
    }
    let results: Vec<Result<bool>> = with_jobs(config.jobs, || {
        jobs.par_iter()
            .map(|&(replicate, task)| {
                let corpus_path = layout.task_corpus(task);
                if !corpus_path.exists() {
                    return Err(missing(&corpus_path));
                }
                let corpus: Vec<TaskInstance> = read_jsonl(&corpus_path)?;
                let seed = derive_seed(
                    config.seed,
                    &[&replicate.to_string(), "task", task.as_str()],
                );
                let train = config.train.task_config(seed);
                let fingerprint = task_fingerprint(&inputs.base_hash, task, &train, &corpus);
                let path = layout.task_checkpoint(replicate, task);
                if reusable(&path, &fingerprint).is_some() {
                    return Ok(false);
                }
                let set = instances_training_set(&inputs.vocab, task, &corpus);
                let (adapter, report) =
                    train_task(&set, &inputs.base, &train).with_context(|| {
                        format!("training the {task} task adapter for seed {replicate}")
                    })?;
                info!(
                    "task adapter {task} seed {replicate}: final CE {:.4}",
                    report.final_ce
                );
                let prov = Provenance {
                    task_type: task,
                    base_hash: inputs.base_hash.clone(),
                    fingerprint,
                };
                checkpoint::save_task(&path, &adapter, &prov)?;
                write_report(&path, &report)?;
                Ok(true)
            })
            .collect()
    })?;
    tally(results)
}

fn tally(results: Vec<Result<bool>>) -> Result<TrainSummary> {
    let mut summary = TrainSummary::default();
    for r in results {
        if r? {
            summary.trained += 1;
        } else {
            summary.reused += 1;
        }
    }
    Ok(summary)
}

/// Loads a task checkpoint, checking it was trained against `base_hash`.
pub fn load_task_adapter(path: &Path, base_hash: &str) -> Result<(TaskAdapter, String)> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.header.base_hash != base_hash {
        bail!(
            "{} was trained against a different base model",
            path.display()
        );
    }
    let fingerprint = ckpt.header.fingerprint.clone();
    Ok((ckpt.into_task()?, fingerprint))
}

/// Per-site `max|A_K·A_Tᵀ|`, the largest over sites.
pub fn max_cross_product(task: &TaskAdapter, know: &KnowledgeAdapter) -> Result<f64> {
    let mut worst = 0.0f64;
    for (t, k) in task.layers.iter().zip(know.layers()) {
        worst = worst.max(k.a.matmul_t(&t.a)?.max_abs());
    }
    Ok(worst)
}

fn audit_hard(path: &Path, task: &TaskAdapter) -> Result<()> {
    let know = checkpoint::load(path)?.into_knowledge()?;
    let worst = max_cross_product(task, &know)?;
    let finite = know
        .layers()
        .iter()
        .all(|l| l.a.is_finite() && l.b.is_finite());
    if !finite || worst > HARD_AUDIT_TOLERANCE {
        bail!(
            "{} fails the orthogonality audit: max|A_K·A_Tᵀ| = {worst:e} > {HARD_AUDIT_TOLERANCE:e}",
            path.display()
        );
    }
    Ok(())
}

struct TaskContext {
    adapter: TaskAdapter,
    fingerprint: String,
    bases: Option<Vec<Arc<NullSpaceBasis>>>,
}

pub fn cmd_train_docs(config: &RunConfig) -> Result<TrainSummary> {
    let layout = Layout::new(&config.out_dir);
    let inputs = load_inputs(config)?;
    echo_config(config, &layout.root)?;
    let mut summary = TrainSummary::default();
    for &replicate in &config.seeds {
        for &task in &config.world.tasks {
            for &variant in &config.train.variants {
                let s = train_docs_for(config, &layout, &inputs, replicate, task, variant)?;
                summary.trained += s.trained;
                summary.reused += s.reused;
            }
        }
    }
    Ok(summary)
}

fn train_docs_for(
    config: &RunConfig,
    layout: &Layout,
    inputs: &Inputs,
    replicate: u64,
    task: TaskType,
    variant: Variant,
) -> Result<TrainSummary> {
    let task_ctx = if variant == Variant::Entangled {
        None
    } else {
        let path = layout.task_checkpoint(replicate, task);
        if !path.exists() {
            bail!(
                "the {variant} variant needs the task adapter {}; run `osd train-task` first",
                path.display()
            );
        }
        let (adapter, fingerprint) = load_task_adapter(&path, &inputs.base_hash)?;
        let bases = (variant == Variant::Hard)
            .then(|| precompute_bases(&adapter, config.train.tau))
            .transpose()?;
        Some(TaskContext {
            adapter,
            fingerprint,
            bases,
        })
    };
    let docs: Vec<usize> = (0..inputs.world.doc_ids.len()).collect();
    let results: Vec<Result<bool>> = with_jobs(config.jobs, || {
        docs.par_iter()
            .map(|&d| {
                train_one_doc(
                    config,
                    layout,
                    inputs,
                    replicate,
                    task,
                    variant,
                    task_ctx.as_ref(),
                    d,
                )
            })
            .collect()
    })?;
    let summary = tally(results)?;
    info!("seed {replicate} {variant}/{task}: {summary}");
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn train_one_doc(
    config: &RunConfig,
    layout: &Layout,
    inputs: &Inputs,
    replicate: u64,
    task: TaskType,
    variant: Variant,
    task_ctx: Option<&TaskContext>,
    doc: usize,
) -> Result<bool> {
    let doc_id = &inputs.world.doc_ids[doc];
    let set = doc_training_set(&inputs.world, &inputs.vocab, doc, task)?;
    let seed = derive_seed(
        config.seed,
        &[&replicate.to_string(), "knowledge", task.as_str(), doc_id],
    );
    let train = config.train.knowledge_config(variant, seed);
    let fingerprint = hash_json(&json!({
        "kind": "knowledge",
        "variant": variant,
        "task_type": task,
        "doc_id": doc_id,
        "base_hash": inputs.base_hash,
        "train": train,
        "examples": set.examples,
        "task_adapter": task_ctx.map(|t| &t.fingerprint),
    }));
    let path = layout.knowledge_checkpoint(replicate, variant, task, doc_id);
    let reused = reusable(&path, &fingerprint).is_some();
    if !reused {
        let (know, report) = train_knowledge(
            doc_id,
            &set,
            task_ctx.map(|t| &t.adapter),
            task_ctx.and_then(|t| t.bases.as_deref()),
            &inputs.base,
            &train,
        )
        .with_context(|| format!("training {variant} adapter for {doc_id} (seed {replicate})"))?;
        let prov = Provenance {
            task_type: task,
            base_hash: inputs.base_hash.clone(),
            fingerprint,
        };
        checkpoint::save_knowledge(&path, &know, &prov)?;
        write_report(&path, &report)?;
    }
    if variant == Variant::Hard {
        audit_hard(&path, &task_ctx.expect("hard has a task adapter").adapter)?;
    }
    Ok(!reused)
}

// ---------------------------------------------------------------- eval

/// Loads every readable knowledge checkpoint of one variant; missing or
/// unreadable files are skipped, so the sweep records per-cell failures.
pub fn load_knowledge_pool(
    layout: &Layout,
    replicate: u64,
    variant: Variant,
    task: TaskType,
    doc_ids: &[String],
) -> HashMap<String, KnowledgeAdapter> {
    let loaded: Vec<Option<KnowledgeAdapter>> = doc_ids
        .par_iter()
        .map(|d| {
            let path = layout.knowledge_checkpoint(replicate, variant, task, d);
            if !path.exists() {
                return None;
            }
            match checkpoint::load(&path)
                .map_err(anyhow::Error::from)
                .and_then(|c| Ok(c.into_knowledge()?))
            {
                Ok(k) => Some(k),
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    None
                }
            }
        })
        .collect();
    loaded
        .into_iter()
        .flatten()
        .map(|k| (k.doc_id().to_string(), k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub cells: usize,
    pub failed: usize,
    pub warnings: Vec<String>,
    pub control_flat: Option<bool>,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} cells, {} failed", self.cells, self.failed)?;
        if let Some(flat) = self.control_flat {
            write!(
                f,
                ", no_adapter control {}",
                if flat { "flat" } else { "NOT flat" }
            )?;
        }
        for w in &self.warnings {
            write!(f, "\nwarning: {w}")?;
        }
        Ok(())
    }
}

pub fn cmd_eval(config: &RunConfig) -> Result<DepthSweepReport> {
    let layout = Layout::new(&config.out_dir);
    let inputs = load_inputs(config)?;
    let index = build_corpus_index(config, &inputs.corpus)?;
    let variants: Vec<Variant> = config
        .sweep
        .methods
        .iter()
        .filter_map(|m| m.variant())
        .collect();
    let needs_task = config.sweep.methods.iter().any(|m| m.uses_task_adapter());
    let mut cells: Vec<SweepCell> = Vec::new();
    with_jobs(config.jobs, || -> Result<()> {
        for &task in &config.world.tasks {
            let instances = load_instances(&layout, task)?;
            for &replicate in &config.seeds {
                let task_adapter = if needs_task {
                    let path = layout.task_checkpoint(replicate, task);
                    match path
                        .exists()
                        .then(|| load_task_adapter(&path, &inputs.base_hash))
                    {
                        Some(Ok((t, _))) => Some(t),
                        Some(Err(e)) => {
                            warn!("{e:#}");
                            None
                        }
                        None => None,
                    }
                } else {
                    None
                };
                let knowledge: HashMap<Variant, HashMap<String, KnowledgeAdapter>> = variants
                    .iter()
                    .map(|&v| {
                        (
                            v,
                            load_knowledge_pool(&layout, replicate, v, task, &inputs.world.doc_ids),
                        )
                    })
                    .collect();
                let sweep_inputs = SweepInputs {
                    base: &inputs.base,
                    vocab: &inputs.vocab,
                    index: &index,
                    instances: &instances,
                    task_type: task,
                    task: task_adapter.as_ref(),
                    knowledge: &knowledge,
                    seed: replicate,
                };
                let produced = sweep_cells(&sweep_inputs, &config.sweep)?;
                info!("seed {replicate} {task}: {} cells", produced.len());
                cells.extend(produced);
            }
        }
        Ok(())
    })??;
    let report = DepthSweepReport::from_cells(&config.sweep, cells);
    let reports = layout.reports();
    echo_config(config, &layout.root)?;
    echo_config(config, &reports)?;
    write_text(&reports.join("sweep.csv"), &report.to_csv())?;
    write_json(&reports.join("sweep.json"), &report)?;
    if !report.cells.is_empty() && report.failed_cells() == report.cells.len() {
        let first = report.cells[0].error.clone().unwrap_or_default();
        bail!("every sweep cell failed (first error: {first})");
    }
    Ok(report)
}

impl From<&DepthSweepReport> for EvalSummary {
    fn from(r: &DepthSweepReport) -> Self {
        Self {
            cells: r.cells.len(),
            failed: r.failed_cells(),
            warnings: r.warnings.clone(),
            control_flat: r.control_flat,
        }
    }
}

// ---------------------------------------------------------------- analyze

pub const EMPTY_RELEVANT_GUIDANCE: &str = "relevant pairs come from instances with two or more source documents; \
     include `qa` in world.tasks, set analysis.task = \"qa\" and world.multi_source > 0, then rerun `osd gen`";

pub fn cmd_analyze(config: &RunConfig) -> Result<SimilarityReport> {
    let layout = Layout::new(&config.out_dir);
    let inputs = load_inputs(config)?;
    let task = config.analysis.task;
    let instances = load_instances(&layout, task)?;
    let pairs: PairSet = match collect_pairs(
        &instances,
        config.analysis.n_irrelevant,
        derive_seed(config.seed, &["analysis", "pairs"]),
    ) {
        Err(OsdError::EmptyRelevant) => {
            bail!("{}; {EMPTY_RELEVANT_GUIDANCE}", OsdError::EmptyRelevant)
        }
        other => other?,
    };
    let reports_dir = layout.reports();
    let mut reports = Vec::new();
    with_jobs(config.jobs, || -> Result<()> {
        for &variant in &config.train.variants {
            let pool = load_knowledge_pool(
                &layout,
                config.analysis.replicate,
                variant,
                task,
                &inputs.world.doc_ids,
            );
            let report = similarity_report(variant, &pool, &pairs, &config.analysis.kinds)
                .with_context(|| {
                    format!(
                        "{variant} adapters of seed {} are incomplete; run `osd train-docs` first",
                        config.analysis.replicate
                    )
                })?;
            write_text(
                &reports_dir.join(format!("similarity_{variant}.csv")),
                &report.histogram_csv(),
            )?;
            write_json(
                &reports_dir.join(format!("similarity_{variant}.json")),
                &report.summary(),
            )?;
            reports.push(report);
        }
        Ok(())
    })??;
    let combined = SimilarityReport::combine(reports);
    echo_config(config, &layout.root)?;
    echo_config(config, &reports_dir)?;
    write_json(
        &reports_dir.join("similarity_summary.json"),
        &combined.summary(),
    )?;
    Ok(combined)
}

// ---------------------------------------------------------------- pipeline

/// gen → index → train-task → train-docs → eval → analyze.
pub fn cmd_pipeline(config: &RunConfig) -> Result<(DepthSweepReport, SimilarityReport)> {
    let gen = cmd_gen(config)?;
    info!(
        "gen: {} documents, corpus hash {}",
        gen.n_docs, gen.corpus_hash
    );
    cmd_index(config)?;
    let needs_task = config
        .train
        .variants
        .iter()
        .any(|v| *v != Variant::Entangled)
        || config.sweep.methods.iter().any(|m| m.uses_task_adapter());
    if needs_task {
        let trained = cmd_train_task(config)?;
        info!("train-task: {trained}");
    }
    let trained = cmd_train_docs(config)?;
    info!("train-docs: {trained}");
    let sweep = cmd_eval(config)?;
    let analysis = cmd_analyze(config)?;
    Ok((sweep, analysis))
}
