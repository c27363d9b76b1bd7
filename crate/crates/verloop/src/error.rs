//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration (bad thresholds, variant
    /// mismatches between question type and ground truth, unknown backend).
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric operation received input that violates its contract
    /// (empty batch, non-finite log-probability, mismatched lengths).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A rollout group that cannot be normalized (fewer than two rollouts).
    #[error("invalid rollout group: {0}")]
    InvalidGroup(String),

    /// Corrupt or missing on-disk data: datasets, rollout stores, pair
    /// files, checkpoints.
    #[error("data error: {0}")]
    Data(String),

    /// Judge or oracle backend failure that survived all retries.
    #[error("backend error: {0}")]
    Backend(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI reporting: 1 usage/config, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::InvalidInput(_) | Error::InvalidGroup(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Backend(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
