//! Run configuration: one TOML file with a section per pipeline stage.
//! Unknown keys are rejected and every field has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use osd_core::adapters::FlattenKind;
use osd_core::benchmark::{SweepConfig, Vocab, WorldConfig};
use osd_core::retrieval::Bm25Params;
use osd_core::training::{LrSchedule, OptimizerKind, TrainConfig};
use osd_core::{ModelConfig, TaskType, Variant};
use serde::{Deserialize, Serialize};

/// Environment variable overriding the output root; `--out` wins over it.
pub const OUT_DIR_ENV: &str = "OSD_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed: drives world generation, instance sampling, adapter
    /// initialisation and batch order. The frozen base model has its own
    /// seed in `[model]`.
    pub seed: u64,
    /// Replicate labels; every replicate trains its own adapters.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 means one per available core.
    pub jobs: usize,
    pub world: WorldSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub retrieval: Bm25Params,
    pub sweep: SweepConfig,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            jobs: 0,
            world: WorldSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            retrieval: Bm25Params::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_docs: usize,
    /// Documents of the held-out world whose instances train the task
    /// adapters; its entities are disjoint from the evaluation world's.
    pub task_docs: usize,
    pub task_entities: usize,
    /// Single-source instances per document and task.
    pub per_doc: usize,
    /// Two-hop QA instances whose facts live in different documents.
    pub multi_source: usize,
    pub tasks: Vec<TaskType>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            n_entities: 150,
            n_relations: 8,
            n_docs: 200,
            task_docs: 100,
            task_entities: 150,
            per_doc: 3,
            multi_source: 100,
            tasks: vec![TaskType::Qa],
        }
    }
}

impl WorldSection {
    pub fn eval_world(&self) -> WorldConfig {
        WorldConfig {
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            n_docs: self.n_docs,
            entity_offset: 0,
        }
    }

    pub fn task_world(&self) -> WorldConfig {
        WorldConfig {
            n_entities: self.task_entities,
            n_relations: self.n_relations,
            n_docs: self.task_docs,
            entity_offset: self.n_entities,
        }
    }

    /// Vocabulary covering both worlds.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_entities + self.task_entities)
    }
}

/// Optimizer settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl StageConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            rank: t.rank,
            optimizer: t.optimizer,
            schedule: t.schedule,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }

    fn train_config(&self, variant: Variant, lambda: f64, tau: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            rank: self.rank,
            lambda,
            variant,
            tau,
            seed,
            optimizer: self.optimizer,
            schedule: self.schedule,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variants: Vec<Variant>,
    pub task: StageConfig,
    pub knowledge: StageConfig,
    /// Overlap penalty weight of the soft variant.
    pub lambda: f64,
    /// Singular-value threshold of the hard variant's null space.
    pub tau: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let appendix = TrainConfig::default();
        Self {
            variants: vec![Variant::Entangled, Variant::Soft, Variant::Hard],
            task: StageConfig {
                learning_rate: 3e-3,
                epochs: 20,
                batch_size: 16,
                ..StageConfig::from_train(&TrainConfig::task_default())
            },
            knowledge: StageConfig {
                learning_rate: 5e-3,
                epochs: 40,
                batch_size: 8,
                ..StageConfig::from_train(&appendix)
            },
            lambda: appendix.lambda,
            tau: appendix.tau,
        }
    }
}

impl TrainSection {
    pub fn task_config(&self, seed: u64) -> TrainConfig {
        self.task.train_config(Variant::Soft, 0.0, self.tau, seed)
    }

    pub fn knowledge_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        self.knowledge
            .train_config(variant, self.lambda, self.tau, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub n_irrelevant: usize,
    pub kinds: Vec<FlattenKind>,
    /// Replicate whose adapters are analysed.
    pub replicate: u64,
    pub task: TaskType,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            n_irrelevant: 300,
            kinds: vec![FlattenKind::ASide, FlattenKind::BSide],
            replicate: 0,
            task: TaskType::Qa,
        }
    }
}

/// Command-line overrides; `None` keeps the configured value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub variant: Option<Variant>,
    pub k_list: Option<Vec<usize>>,
    pub weight_mode: Option<osd_core::benchmark::WeightMode>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies overrides with precedence flag > environment > file.
    pub fn resolve(mut self, overrides: &Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        if let Some(j) = overrides.jobs {
            self.jobs = j;
        }
        if let Some(v) = overrides.variant {
            self.train.variants = vec![v];
        }
        if let Some(k) = &overrides.k_list {
            self.sweep.k_list = k.clone();
        }
        if let Some(w) = overrides.weight_mode {
            self.sweep.weight_mode = w;
        }
        if let Some(out) = overrides.out_dir.clone().or(env_out) {
            self.out_dir = out;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let needed = self.world.vocab().len();
        if self.model.vocab_size < needed {
            bail!(
                "model.vocab_size = {} but the two worlds need {needed} tokens",
                self.model.vocab_size
            );
        }
        if self.seeds.is_empty() {
            bail!("seeds must list at least one replicate");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.world.tasks.is_empty() {
            bail!("world.tasks must list at least one task");
        }
        if self.train.variants.is_empty() {
            bail!("train.variants must list at least one variant");
        }
        if self.sweep.k_list.is_empty() || self.sweep.k_list.contains(&0) {
            bail!("sweep.k_list must be non-empty with every K ≥ 1");
        }
        if !self.seeds.contains(&self.analysis.replicate) {
            bail!(
                "analysis.replicate {} is not one of seeds {:?}",
                self.analysis.replicate,
                self.seeds
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use osd_core::benchmark::WeightMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[world]\nn_docz = 3").is_err());
        assert!(RunConfig::from_toml("[train.knowledge]\nlambda = 0.5").is_err());
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut c = RunConfig::default();
        c.world.n_docs = 40;
        c.train.variants = vec![Variant::Hard];
        c.sweep.weight_mode = WeightMode::Score;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn precedence_is_flag_then_env_then_file() {
        let file = RunConfig::from_toml("out_dir = \"from-file\"\nseed = 4").unwrap();
        let env = Some(PathBuf::from("from-env"));
        let r = file.clone().resolve(&Overrides::default(), None).unwrap();
        assert_eq!(r.out_dir, PathBuf::from("from-file"));
        let r = file
            .clone()
            .resolve(&Overrides::default(), env.clone())
            .unwrap();
        assert_eq!(r.out_dir, PathBuf::from("from-env"));
        let flags = Overrides {
            out_dir: Some(PathBuf::from("from-flag")),
            seed: Some(9),
            k_list: Some(vec![1, 3]),
            variant: Some(Variant::Soft),
            ..Overrides::default()
        };
        let r = file.resolve(&flags, env).unwrap();
        assert_eq!(r.out_dir, PathBuf::from("from-flag"));
        assert_eq!(r.seed, 9);
        assert_eq!(r.sweep.k_list, vec![1, 3]);
        assert_eq!(r.train.variants, vec![Variant::Soft]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nvocab_size = 100").is_err());
        assert!(RunConfig::from_toml("seeds = []").is_err());
        assert!(RunConfig::from_toml("seeds = [1, 1]").is_err());
        let bad_k = Overrides {
            k_list: Some(vec![0]),
            ..Overrides::default()
        };
        assert!(RunConfig::default().resolve(&bad_k, None).is_err());
    }

    #[test]
    fn stage_configs_carry_section_values() {
        let t = TrainSection::default();
        let k = t.knowledge_config(Variant::Hard, 7);
        assert_eq!((k.learning_rate, k.epochs, k.batch_size), (5e-3, 40, 8));
        assert_eq!(
            (k.lambda, k.tau, k.seed, k.variant),
            (0.1, 1e-5, 7, Variant::Hard)
        );
        let task = t.task_config(3);
        assert_eq!(
            (task.learning_rate, task.epochs, task.batch_size, task.seed),
            (3e-3, 20, 16, 3)
        );
    }
}
