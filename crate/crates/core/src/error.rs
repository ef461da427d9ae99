use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("target {target} out of range for {classes} classes (row {row})")]
    TargetOutOfRange { row: usize, target: usize, classes: usize },

    #[error("backward called before any forward pass")]
    NoForwardPass,

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged (seed {seed}, epoch {epoch}): {detail}")]
    Diverged { seed: u64, epoch: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },

    #[error("missing artifact {path}; run the `{stage}` stage first")]
    MissingStage { path: PathBuf, stage: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn artifact(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
