//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the alignment laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a domain precondition (bad token id, terminal state
    /// where a non-terminal one was required, malformed trajectory, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A table lookup failed (missing context key, reward entry, ...).
    #[error("key error: {0}")]
    Key(String),

    /// An enumeration would exceed the configured budget.
    #[error("enumeration budget exceeded: {predicted} trajectories predicted, budget {budget}")]
    Budget { predicted: u128, budget: u128 },

    /// Two distribution tables disagree on support where the divergence
    /// requires agreement and smoothing is not enabled.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// A metric or loss became non-finite during iteration.
    #[error("numeric abort at iteration {iteration}: {context}")]
    Numeric { iteration: usize, context: String },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure while reading or writing an artifact.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn key(msg: impl Into<String>) -> Self {
        Error::Key(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
