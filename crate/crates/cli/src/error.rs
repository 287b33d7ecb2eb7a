use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::Stage;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{needed_by} needs the stage {missing} checkpoint ({path}); run `shapeseq {}` first", .missing.command())]
    MissingStage {
        needed_by: String,
        missing: Stage,
        path: PathBuf,
    },

    #[error("no {split} shapes under {path}; run `shapeseq synth-data` first")]
    MissingData { split: String, path: PathBuf },

    #[error("config {source_name}: {message}")]
    Config { source_name: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] shapeseq::Error),
}

impl<M> From<shapeseq::TrainError<M>> for CliError {
    fn from(e: shapeseq::TrainError<M>) -> Self {
        CliError::Core(e.into())
    }
}
