//! Orthogonal subspace decomposition for parametric retrieval-augmented
//! generation.
//!
//! A shared Task LoRA captures task behaviour; per-document Knowledge LoRAs
//! are trained on top of it with their down-projections kept away from the
//! task adapter's row space, either by a Frobenius overlap penalty (`soft`)
//! or by living in the task adapter's null space (`hard`). At inference the
//! retrieved documents' adapters are merged and the task adapter is applied
//! once.

pub mod adapters;
pub mod analysis;
pub mod benchmark;
pub mod error;
pub mod linalg;
pub mod model;
pub mod retrieval;
pub mod training;

pub use adapters::{
    FlattenKind, KnowledgeAdapter, LoraLayer, MergeWeights, MergedKnowledge, SiteId, SiteKind,
    SiteShape, TaskAdapter, TaskType, Variant,
};
pub use analysis::{PairSet, SimilarityReport};
pub use benchmark::{
    DepthSweepReport, SweepConfig, SyntheticWorld, TaskInstance, Vocab, WeightMode,
};
pub use error::{OsdError, Result};
pub use linalg::{Matrix, NullSpaceBasis, SvdResult};
pub use model::{BaseWeights, Batch, Example, ModelConfig};
pub use retrieval::{Bm25Params, Document, InvertedIndex, RetrievalResult};
pub use training::{TrainConfig, TrainReport, TrainingSet};
