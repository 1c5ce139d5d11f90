//! Synthetic knowledge world, task instances, metrics and the retrieval
//! depth sweep.

pub mod instances;
pub mod metrics;
pub mod sweep;
pub mod world;

pub use instances::{
    doc_training_set, gen_instances, gen_multi_source, instances_training_set, TaskInstance, Vocab,
};
pub use metrics::{accuracy, f1_token, normalize, task_metric};
pub use sweep::{
    run_depth_sweep, sweep_cells, DepthSweepReport, Method, MethodSummary, Retriever, SweepCell,
    SweepConfig, SweepInputs, WeightMode,
};
pub use world::{corpus_hash, gen_world, Fact, SyntheticWorld, WorldConfig};
