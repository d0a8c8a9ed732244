//! Operator commands for the ensemble recommender: preprocessing, training,
//! evaluation, gradient audit and ablation grids.

pub mod ablate;
pub mod commands;
pub mod dataset;
pub mod manifest;
pub mod settings;
pub mod staging;

use emkd_core::EmkdError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] EmkdError),
    #[error("{0}")]
    Usage(String),
    #[error("dataset fingerprint mismatch: checkpoint was trained on {expected}, given dataset is {found}")]
    Fingerprint { expected: String, found: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
