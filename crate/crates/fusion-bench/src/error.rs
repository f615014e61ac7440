//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A referenced input file is missing or unreadable.
    #[error("ingestion error: {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    /// A file or tensor does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// An emotion label string is not one of the known categories.
    #[error("unknown label: {0:?}")]
    Label(String),

    /// An invalid configuration or an operation precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Not enough data to compute statistics.
    #[error("statistics error: {0}")]
    Stats(String),

    /// A metric was requested over an empty set.
    #[error("metric error: {0}")]
    Metric(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// A required external tool is unavailable.
    #[error("environment error: {0}")]
    Environment(String),

    /// An external extractor ran but failed.
    #[error("extraction error: {0}")]
    Extraction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI contract: input problems map to 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}
