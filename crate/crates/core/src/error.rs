use std::path::PathBuf;

use thiserror::Error;

use crate::protocol::ProtocolError;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoeError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence position {pos} exceeds maximum length {max}")]
    SequenceLength { pos: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("non-finite function value at probe point: {0}")]
    Probe(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CoeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoeError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoeError>;
