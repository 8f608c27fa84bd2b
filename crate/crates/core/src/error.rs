//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The configuration file could not be read or parsed.
    #[error("configuration error: {0}")]
    Config(String),

    /// A parameter violates one of its invariants.
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// Too few observed events to produce a meaningful estimate.
    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    /// The generator has more than one stationary state.
    #[error("steady state is degenerate: null space has dimension {dim}")]
    DegenerateSteadyState { dim: usize },

    /// Time evolution produced a non-finite state.
    #[error("integration failed: {0}")]
    Integration(String),

    /// An estimator could not be evaluated on the given data.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// The fit problem is rank deficient.
    #[error("rank-deficient fit problem: {0}")]
    RankDeficient(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
