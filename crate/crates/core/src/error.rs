use thiserror::Error;

/// Errors raised by the model, solvers and simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of range. The first field names the
    /// offending field.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A scheduling decision violates the feasibility rules of the mode.
    #[error("scheduling error: {0}")]
    Scheduling(String),

    /// An iterative solver did not reach its tolerance.
    #[error("solver did not converge after {iterations} iterations (span {span:e})")]
    NotConverged { iterations: usize, span: f64 },

    /// A model failed an internal consistency check.
    #[error("solver error: {0}")]
    Solver(String),

    /// The linear program has no feasible point.
    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program failed: {0}")]
    Lp(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
