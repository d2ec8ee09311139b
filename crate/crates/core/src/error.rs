use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that do not fit an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input that violates an operation's precondition.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Inconsistent model, training or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; the run is aborted.
    #[error("non-finite loss at step {step} (lr {lr}, batch hash {batch_hash})")]
    NonFiniteLoss { step: u64, lr: f64, batch_hash: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
