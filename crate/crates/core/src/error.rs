use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trajectory `{id}` has {len} frame(s); at least 2 are required")]
    EmptyTrajectory { id: String, len: usize },

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: u64, reason: String },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("dataset format: {}: offset {offset}: {reason}", file.display())]
    DatasetFormat {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("parse error: {}: line {line}: {reason}", file.display())]
    Parse {
        file: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("{0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }
}
