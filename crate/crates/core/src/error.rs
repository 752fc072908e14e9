use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({x}, {y}, {i}) out of bounds for shape {shape}")]
    OutOfBounds {
        shape: crate::Shape3,
        x: usize,
        y: usize,
        i: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty calibration corpus")]
    EmptyCorpus,

    #[error("dimension {dim} is degenerate (lo == hi == {value})")]
    DegenerateDimension { dim: usize, value: f64 },

    #[error("mask selects no positions; the masked objective is undefined")]
    EmptyMask,

    #[error("cannot select {requested} of {available} masked indices")]
    NotEnoughMasked { requested: usize, available: usize },

    #[error("observed configuration has zero probability under the joint")]
    ZeroSupport,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
