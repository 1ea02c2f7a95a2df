use thiserror::Error;

/// Crate-wide error type. Variants follow the failure taxonomy of the
/// pipeline: bad input data, bad configuration, numeric-domain violations,
/// provider transport trouble, and operations applied to incompatible state.
#[derive(Debug, Error)]
pub enum Error {
    /// Input that could not be parsed at all (malformed JSONL, bad TOML).
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Structurally valid input that breaks the data contract
    /// (unknown label, empty text, duplicate vocabulary word).
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric-domain violation (zero-norm embedding, empty pool,
    /// out-of-range reward).
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation applied to a state that cannot accept it
    /// (vocabulary mismatch, missing generator for a class).
    #[error("state error: {0}")]
    State(String),

    /// Neutral-provider failure that survived the configured retries.
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },

    /// Unreadable or incompatible checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
