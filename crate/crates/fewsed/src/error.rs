//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV file {path}: {reason}")]
    WavDecode { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {path}: {reason}")]
    WavUnsupported { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate similarity input: {0}")]
    DegenerateSimilarity(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("episode construction failed for {source_id}: {reason}")]
    Episode { source_id: String, reason: String },

    #[error("training refused: {0}")]
    Training(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("malformed annotation file {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
