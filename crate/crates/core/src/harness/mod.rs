//! Configuration, datasets, experiment pipelines and output files.

pub mod check;
pub mod config;
pub mod dataset;
pub mod output;
pub mod pipeline;
pub mod report;

pub use config::{load_config, ExperimentConfig, Mode, PipelineProtocol};
pub use output::{emit_outputs, Manifest};
pub use pipeline::{run, run_theory_suite, run_ticket_pipeline, ResultBundle};
