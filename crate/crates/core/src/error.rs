use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("step decay requires the epoch count to be divisible by the drop period (E = {epochs}, K = {drop_every})")]
    EpochsNotDivisible { epochs: usize, drop_every: usize },

    #[error("{path}: {reason} at byte offset {offset}")]
    Idx {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("{path}: row {row}, column `{column}`: {reason}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
