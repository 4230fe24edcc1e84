use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the estimation, aggregation and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e}); apply pd_project first")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("symmetric eigensolver did not converge after {sweeps} sweeps (condition estimate {condition:e})")]
    EigenNoConvergence { sweeps: usize, condition: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { solver: &'static str, iterations: usize, residual: f64, best_iterate: Vec<f64> },

    #[error("logistic fit diverged after {iterations} iterations: data appear completely separated")]
    Separation { iterations: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(#[from] crate::distsim::DecodeError),

    #[error("{failed} of {total} replicates failed (first failure: {first_error})")]
    StudyFailed { failed: usize, total: usize, first_error: String },
}
