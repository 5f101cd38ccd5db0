use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a mathematical function.
    #[error("domain error in {function}: {message}")]
    Domain {
        function: &'static str,
        message: String,
    },

    /// Invalid configuration or input shape, detected before any computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical failure such as a non-positive-definite matrix.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A numerical failure raised inside the inference loop.
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// Two arrays disagree on a dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Pruning would remove every feature column.
    #[error("pruning at threshold {threshold} would remove all {columns} features")]
    PruneAll { threshold: f64, columns: usize },

    /// Not enough training patches were available.
    #[error("insufficient patches: required {required}, available {available}")]
    InsufficientPatches { required: usize, available: usize },

    /// A binary container or text file could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(function: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            function,
            message: message.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
