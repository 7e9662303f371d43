//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A vector expected to be usable for cosine geometry has (near-)zero norm.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// A caller-side contract was violated (non-scalar loss, non-stochastic rows, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation was invoked against missing or inconsistent state.
    #[error("state error: {0}")]
    State(String),

    /// NaN/Inf appeared in a numeric path.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized artifact is malformed; the message names the failing field.
    #[error("format error: {0}")]
    Format(String),

    /// A requested metric has no ground truth to be computed over.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
