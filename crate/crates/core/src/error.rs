use thiserror::Error;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its physical domain.
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    /// Input data violates a precondition of the operation (ordering, sizes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The data carry no usable information (all zero, too few points).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Measurement settings do not span the operator space.
    #[error("ill-conditioned settings: condition number {0:.3e}")]
    IllConditioned(f64),

    /// Iterative fit did not converge.
    #[error("fit failed: {message}")]
    FitFailure { message: String, residuals: Vec<f64> },

    /// Rejection sampler exhausted its attempt budget.
    #[error("rejection sampling failed after {attempts} attempts")]
    SamplingBudget { attempts: usize },

    /// A computed state left the set of physical density matrices.
    #[error("internal numerical error: {0}")]
    Internal(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::ParameterDomain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
