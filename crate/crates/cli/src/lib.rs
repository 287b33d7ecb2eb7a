//! Orchestration of the training pipeline and the `shapeseq` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{run_stage, RunDir, Stage};
