use thiserror::Error;

/// Errors raised by the estimators, samplers and planners in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The request is well-formed but not supported by this implementation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A sampled integrand produced a non-finite value.
    #[error("estimator failure at sample {index}: {reason}")]
    EstimatorFailure { index: u64, reason: String },

    /// Configuration could not be parsed or failed validation.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// No feasible solution exists for the requested budget or constraint.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The projected resource use exceeds the configured cap.
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// A floating-point result overflowed.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Not enough replicates or samples to carry out a fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
