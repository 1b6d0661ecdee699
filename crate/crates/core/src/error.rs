use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("every depth pixel is zero or missing")]
    AllInvalid,
    #[error("backward cache does not match: {0}")]
    CacheMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("group weights sum to {sum}, expected 1")]
    WeightSumViolation { sum: f64 },
    #[error("degenerate polygon with {vertices} vertices")]
    DegeneratePolygon { vertices: usize },
    #[error("unsupported precision threshold {0}; expected one of 0.5, 0.6, 0.7, 0.8, 0.9")]
    Threshold(f64),
    #[error("sample id mismatch at position {position}: prediction {pred}, ground truth {gt}")]
    IdMismatch {
        position: usize,
        pred: String,
        gt: String,
    },
    #[error("could not place objects for seed {seed} after {attempts} attempts")]
    PlacementFailure { seed: u64, attempts: usize },
    #[error("no referring expression identifies the target uniquely")]
    Ambiguity,
    #[error("{0} tokens exceed the maximum of 20")]
    TokenOverflow(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension {0} does not fit in 32 bits")]
    Overflow(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
