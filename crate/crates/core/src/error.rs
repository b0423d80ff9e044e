use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested primitive.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A numerical operation produced NaN or infinity.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Backward pass requested on a tape that was already consumed.
    #[error("computation tape already consumed by a backward pass")]
    TapeConsumed,

    /// Degenerate geometry (rank-deficient system, point at infinity, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Invalid argument or configuration value.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// File format violation (bad magic, truncated payload, CRC mismatch, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
