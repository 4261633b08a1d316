use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by grid construction, solvers, verification and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("Newton iteration stopped after {iters} iterations with residual {residual:e}")]
    NonConvergence { iters: usize, residual: f64 },

    #[error("admissibility lost: step shrank to {step:e} with minimum block eigenvalue {min_eig:e}")]
    AdmissibilityLoss { step: f64, min_eig: f64 },

    #[error("singular linearization: {0}")]
    SingularLinearization(String),

    #[error("continuation failed at t = {t} with step {dt:e}: {reason}")]
    PathFailure { t: f64, dt: f64, reason: String },

    #[error("fixed-point iteration stalled after {sweeps} sweeps (contraction ratio {ratio:.4})")]
    FixedPointStall { sweeps: usize, ratio: f64 },

    #[error("solution range [{min_u:.6}, {max_u:.6}] leaves the barrier window [{lo:.6}, {hi:.6}]")]
    BarrierViolation { min_u: f64, max_u: f64, lo: f64, hi: f64 },

    #[error("no sign change of psi - 1 on [{a}, {b}] (values {fa:e}, {fb:e})")]
    NoBracket { a: f64, b: f64, fa: f64, fb: f64 },

    #[error("least-squares step stagnated with residual {residual:e}; the coupled system has no solution on this grid")]
    Inconsistent { residual: f64 },

    #[error("degenerate mesh element(s): {0:?}")]
    DegenerateMesh(Vec<usize>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors produced by numerical solvers, as opposed to bad input or I/O.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::AdmissibilityLoss { .. }
                | Error::SingularLinearization(_)
                | Error::PathFailure { .. }
                | Error::FixedPointStall { .. }
                | Error::BarrierViolation { .. }
                | Error::NoBracket { .. }
                | Error::Inconsistent { .. }
        )
    }
}
