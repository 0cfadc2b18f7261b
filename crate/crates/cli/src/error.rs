//! Harness errors and their process exit codes.

use cotcap_core::Error as CoreError;

/// Everything a command can fail with, bucketed by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or command-line input → exit 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Missing or stale upstream artifact → exit 3.
    #[error("dependency error: {0}")]
    Dependency(String),
    /// A non-finite value surfaced during computation → exit 4.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Anything else → exit 1.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// The process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(msg) => CliError::Config(msg),
            CoreError::NonFinite(msg) => CliError::Numeric(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("serialization error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
