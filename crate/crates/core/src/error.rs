//! Error types shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LfmaError>;

/// Errors emitted by the training toolkit.
#[derive(Debug, Error)]
pub enum LfmaError {
    /// A configuration value is invalid or inconsistent with other values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates a precondition (range, sign, emptiness).
    #[error("argument error: {0}")]
    Argument(String),

    /// Dataset files are missing or malformed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A loss turned NaN/Inf during training; aborts rather than continuing.
    #[error("non-finite loss at batch {batch_index}: {detail}")]
    NonFiniteLoss { batch_index: usize, detail: String },

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An I/O failure, annotated with the path involved.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A failure inside one cell of a multi-run comparison, tagged with the
    /// (mode, seed) cell so the caller knows which run to inspect or resume.
    #[error("compare cell '{cell}': {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<LfmaError>,
    },
}

impl LfmaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LfmaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a bad config rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            LfmaError::Config(_) | LfmaError::Argument(_) => true,
            LfmaError::Cell { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
