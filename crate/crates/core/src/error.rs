use thiserror::Error;

/// Errors raised by the solvers, the simulator and the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    /// The outer fixed-point iteration neither converged nor diverged.
    #[error("indeterminate outcome after {iterations} iterations: residual trace ends at {last_residual:.3e}, Tr(R11) trace ends at {last_norm:.3e}")]
    Indeterminate {
        iterations: usize,
        last_residual: f64,
        last_norm: f64,
        residual_trace: Vec<f64>,
        norm_trace: Vec<f64>,
    },

    /// Finite-n Newton failure, with the objective trace up to the failure.
    #[error("Newton solve failed after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    Newton {
        iterations: usize,
        grad_norm: f64,
        loss_trace: Vec<f64>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("join key {0} missing from one input")]
    MissingKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn convergence(what: impl Into<String>, iterations: usize, residual: f64) -> Self {
        Error::Convergence {
            what: what.into(),
            iterations,
            residual,
        }
    }

    /// Whether the failure is numerical (as opposed to usage or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. }
                | Error::Newton { .. }
                | Error::Numerical(_)
                | Error::Rank(_)
                | Error::Indeterminate { .. }
                | Error::NotPositiveDefinite(_)
        )
    }
}
