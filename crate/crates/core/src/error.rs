use thiserror::Error;

/// Errors produced by the numerical pipeline.
///
/// The variants are grouped so a front end can map them onto exit codes:
/// input/schema problems, out-of-regime results, and numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },

    #[error("structure rejected: {0}")]
    StructureRejected(String),

    #[error("out of regime: {0}")]
    OutOfRegime(String),

    #[error("iteration stopped contracting: measured factor {factor:.4} (history {history:?})")]
    NonContraction { factor: f64, history: Vec<f64> },

    #[error("no convergence after {iterations} iterations (last residual {last:.3e})")]
    NotConverged {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("map leaves the target: sup modulus {sup_modulus:.6}")]
    TargetViolation { sup_modulus: f64 },

    #[error("insufficient coverage: {feasible} feasible of {requested}")]
    InsufficientCoverage { feasible: usize, requested: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for results that mean "the input is outside where the method applies"
    /// rather than a bug or bad input.
    pub fn is_out_of_regime(&self) -> bool {
        matches!(
            self,
            Error::OutOfRegime(_)
                | Error::NonContraction { .. }
                | Error::TargetViolation { .. }
                | Error::InsufficientCoverage { .. }
        )
    }

    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::StructureRejected(_) | Error::GridMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
