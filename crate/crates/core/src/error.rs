use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error(
        "{active} active observations would need 2^{active} mixture components; \
         the exact posterior is capped at {cap} observations, subsample the data"
    )]
    TooManyObservations { active: usize, cap: usize },

    #[error("Monte Carlo estimator failed at draw {index}: log-ratio {log_ratio} at beta={beta:?}, sigma={sigma}")]
    Estimator {
        index: usize,
        beta: Vec<f64>,
        sigma: f64,
        log_ratio: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
