//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value violates a precondition.
    #[error("config error: {0}")]
    Config(String),

    /// An index (token id, row, category) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A lookup key (word, category) does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A sequence exceeds the model's maximum length.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A dataset or episode request cannot be satisfied.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity was produced by a numeric operation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
