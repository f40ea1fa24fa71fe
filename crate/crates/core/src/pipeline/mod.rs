//! Run configuration, the in-memory pipeline, ablation drivers and the
//! on-disk stages behind the command-line tool.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod stages;

pub use config::RunConfig;
pub use experiment::{run_pipeline, Dataset, Evaluation, RunOutcome};
pub use stages::{run_stage, RunDir, Stage, StageOptions, StageOutput};
