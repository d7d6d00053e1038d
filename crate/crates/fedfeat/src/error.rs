//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad key, bad value, impossible setup).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Bad training data (labels out of range and the like).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary dataset file.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    /// Protocol-level failure (empty shards, mismatched packets, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Privacy-metric estimator failure (empty or degenerate input).
    #[error("metric error: {0}")]
    Metric(String),

    /// Failure while executing a round, with the round attached.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
