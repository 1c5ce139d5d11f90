//! Command-line orchestration for the orthogonal-adapter experiments:
//! configuration, checkpoint persistence and the pipeline stages
//! `gen → index → train-task → train-docs → eval → analyze`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::{
    cmd_analyze, cmd_eval, cmd_gen, cmd_index, cmd_pipeline, cmd_train_docs, cmd_train_task,
    EvalSummary, Layout,
};
pub use config::{Overrides, RunConfig, OUT_DIR_ENV};
