use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("invalid token {token} (vocabulary size {vocab})")]
    InvalidToken { token: u32, vocab: usize },
    #[error("cache inconsistency: {0}")]
    CacheInconsistency(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("block of layer {layer} head {head} is already obfuscated")]
    DoubleObfuscation { layer: usize, head: usize },
    #[error("block is not in the expected state: {0}")]
    BlockState(String),
    #[error("corrupted cloaked block, row {row}: {reason}")]
    Corruption { row: usize, reason: String },
    #[error("row {row} holds {magnitude:.4} where the key only separates values below {limit:.4}; recalibrate θ")]
    OutOfCalibratedRange { row: usize, magnitude: f64, limit: f64 },
    #[error("inconsistent oracle response: {0}")]
    Inconsistency(String),
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
