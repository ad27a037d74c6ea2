//! Error taxonomy shared by every module.
//!
//! Failures carry the level index and the operation that produced them so a
//! caller can tell a modeling mistake (shapes, missing capabilities) from a
//! numerical one (stale points, indefinite Hessians, non-finite values).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem: wrong number of levels, empty dimension, mismatched
    /// oracle count, or a block with an unexpected shape.
    #[error("invalid structure in {context}: {message}")]
    Structure { context: String, message: String },

    /// A derivative was requested at a point whose recorded lower-level
    /// residual exceeds the stationarity tolerance.
    #[error(
        "stale point at level {level}: recorded residual {residual:.3e} exceeds tolerance {tol:.3e}"
    )]
    StalePoint { level: usize, residual: f64, tol: f64 },

    /// A point was used whose lower-level residuals were never recorded by a
    /// solver, but the caller demanded a finite stationarity tolerance.
    #[error("unsolved point at level {level}: no residual recorded, tolerance {tol:.3e} required")]
    UnsolvedPoint { level: usize, tol: f64 },

    /// The reduced Hessian handed to the direct solver is not positive
    /// definite; `pivot` is the index of the first failing Cholesky pivot.
    #[error("matrix in {context} is not positive definite (pivot {pivot})")]
    SingularHessian { context: String, pivot: usize },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    /// Third-order slices were required but the oracle does not provide them.
    #[error("oracle for level {level} provides no third-order slices ({context})")]
    MissingThirdOrder { level: usize, context: String },

    /// A lower-level solve made the residual grow far beyond its entry value.
    #[error(
        "lower-level solve diverged at level {level}: residual grew from {entry:.3e} to {current:.3e}"
    )]
    DivergedLowerLevel { level: usize, entry: f64, current: f64 },

    /// An iteration budget ran out before the requested tolerance was met.
    #[error("convergence budget of {budget} steps exhausted; residuals {residuals:?}")]
    ConvergenceBudget { budget: usize, residuals: Vec<f64> },

    /// A driver iteration failed; wraps the underlying failure with the
    /// 0-based outer step at which it occurred.
    #[error("outer step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Configuration rejected before any numerics ran.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset ingestion failure.
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A row that does not parse; `line` is the 1-based line number in the file.
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },

    /// File-level schema violation (header, column count, emptiness).
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub(crate) fn structure(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Structure { context: context.into(), message: message.into() }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Structure {
            context: context.into(),
            message: format!("expected shape {expected}, got {actual}"),
        }
    }
}
