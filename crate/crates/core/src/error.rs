use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("name is empty after trimming whitespace")]
    EmptyName,
    #[error("input source is empty")]
    EmptySource,
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence has no valid steps")]
    EmptySequence,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("input is empty")]
    EmptyInput,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("column is empty")]
    EmptyColumn,
    #[error("need at least 3 identities to split, got {0}")]
    TooFewIdentities(usize),
    #[error("duplicate item id {0}")]
    DuplicateId(u64),
    #[error("unknown item id {0}")]
    UnknownItem(u64),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
