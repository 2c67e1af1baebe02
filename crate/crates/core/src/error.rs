// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the engine.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while explaining or evaluating a model.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed instance, spec, or configuration.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A vector or matrix did not have the expected shape.
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: String,
    },

    /// The bridge violated the wire protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The bridge answered with values outside their contract.
    #[error("data error in request {id}: {message}")]
    Data { id: String, message: String },

    /// The bridge answered a request with a typed error message.
    #[error("bridge reported error for request {id}: {message}")]
    Bridge { id: String, message: String },

    /// An operation needs a capability the bridge or method does not have.
    #[error("capability error: {0}")]
    Capability(String),

    /// The bridge could not be reached, died, or timed out.
    #[error("transport error: {0}")]
    Transport(String),

    /// A least-squares system was rank deficient.
    #[error("conditioning error: reduced system has rank {rank} < {unknowns} unknowns")]
    Conditioning { rank: usize, unknowns: usize },

    /// An output symbol is not part of the toy model vocabulary.
    #[error("unknown output symbol {0:?}")]
    Vocabulary(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Corpus evaluation produced no usable instance.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the environment (bridge process, network) rather
    /// than of the inputs or of the computation.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::Transport(_) | Error::Protocol(_) | Error::Capability(_) | Error::Bridge { .. } | Error::Data { .. }
        )
    }

    pub(crate) fn dim(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            actual,
            context: context.into(),
        }
    }
}
