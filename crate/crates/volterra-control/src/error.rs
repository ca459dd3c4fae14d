//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user input was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configured resource cap (tree depth, enumeration size) was exceeded.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    /// A coefficient or cost evaluation produced a non-finite value.
    #[error("numerical failure at (t_index={t_index}, s_index={s_index}): {message}")]
    NumericalFailure {
        t_index: usize,
        s_index: usize,
        message: String,
    },

    /// An iterative solver did not converge within its budget.
    #[error("iteration failure after {iterations} iterations (residual history: {residuals:?})")]
    IterationFailure {
        iterations: usize,
        residuals: Vec<f64>,
    },

    /// Scenario text could not be parsed.
    #[error("parse error at line {line}: key `{key}`: {reason}")]
    Parse {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Self {
        Error::ResourceLimit(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
