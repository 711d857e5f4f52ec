use thiserror::Error;

use crate::spectral::EigenResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampled kernel requires a randomness source")]
    MissingRng,

    #[error("quadrature order {0} outside 1..=1000")]
    OrderOutOfRange(usize),

    #[error("lambda = {lambda} is not above the support bound tau = {tau}")]
    Domain { lambda: f64, tau: f64 },

    #[error("bracketing failed: {0}")]
    Bracketing(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("no zero crossing found in ({lo}, {hi})")]
    NoZeroCrossing { lo: f64, hi: f64 },

    #[error("zero vector")]
    ZeroVector,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive semidefinite (eigenvalue {0})")]
    NotPsd(f64),

    #[error("eigensolver did not converge after {} iterations (residual {})", .0.iterations, .0.residual)]
    NotConverged(Box<EigenResult>),

    #[error("config error: {0}")]
    Config(String),
}
