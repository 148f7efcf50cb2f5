//! Error type shared by all estimator modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or non-finite input.
    #[error("invalid {what}: {detail}")]
    Domain { what: &'static str, detail: String },

    /// Exact computation requested above its hard size limit.
    #[error("size {n} exceeds the exact-computation limit {max}")]
    TooLarge { n: usize, max: usize },

    /// The damped belief iteration ran out of iterations. Carries the last
    /// state and the tail of the per-sweep residual trace for diagnosis.
    #[error("belief iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    BpNonConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
        state: Box<crate::bp::BeliefState>,
    },

    /// The convexified initializer failed to reach a doubly stochastic point.
    #[error("convexified initialization stalled after {iterations} passes (residual {residual:.3e})")]
    InitNonConvergence { iterations: usize, residual: f64 },

    /// The per-orthant stationary-point solver stalled.
    #[error("saddle solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    SaddleNonConvergence { iterations: usize, residual: f64 },

    /// Hessian factorization or inversion failed.
    #[error("singular curvature matrix: {0}")]
    Singular(String),

    /// No positive-weight perfect matching exists.
    #[error("infeasible instance: {0}")]
    Infeasible(String),

    /// Malformed input file; names the offending line and field.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            what,
            detail: detail.into(),
        }
    }

    /// Exit-code class used by the command-line front-end: `true` for
    /// numerical failures (exit 2) as opposed to usage/input errors (exit 1).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BpNonConvergence { .. }
                | Error::InitNonConvergence { .. }
                | Error::SaddleNonConvergence { .. }
                | Error::Singular(_)
                | Error::Infeasible(_)
        )
    }
}
