use std::path::PathBuf;

use emkd_tape::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmkdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Malformed {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl EmkdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EmkdError>;
