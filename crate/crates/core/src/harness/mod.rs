//! Experiment configuration, staged training, evaluation and reporting.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod train;

pub use config::{ExperimentConfig, ExperimentMode};
pub use eval::{evaluate, Report};
pub use pipeline::{plan, run_pipeline, PipelineCache, PipelineOptions, PipelineResult};
