//! Error taxonomy shared by every module.
//!
//! Variants map onto the four operator-facing categories: `config`, `io`,
//! `numeric`, `contract`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad dimensions, out-of-range hyperparameter).
    #[error("config: {0}")]
    Config(String),

    /// Tensor shapes do not compose.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite values, diverged training, unreliable estimates.
    #[error("numeric: {0}")]
    Numeric(String),

    /// API misused (stale cache, degenerate batch, frozen-encoder violation,
    /// stage ordering broken).
    #[error("contract: {0}")]
    Contract(String),

    /// File format violation (bad magic, version ahead of reader, truncation).
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Operator-facing category used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) | Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Format(_) | Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
