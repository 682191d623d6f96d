use thiserror::Error;

use crate::cg::CgStats;
use crate::field::MultiField;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative spectral power {power} at |k| = {k}")]
    NegativePower { k: f64, power: f64 },

    #[error("covariance has {0} zero-power modes and cannot be inverted")]
    SingularCovariance(usize),

    #[error("nonpositive noise variance {value} in channel {channel} at pixel {pixel}")]
    NonPositiveVariance { channel: usize, pixel: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("conjugate gradient breakdown: {0}")]
    CgBreakdown(String),

    #[error(
        "conjugate gradient did not converge after {} iterations (residual {:.3e})",
        .stats.iterations, .stats.residual_norm
    )]
    NotConverged { stats: CgStats, best: Box<MultiField> },

    #[error("mixture column {0} is identically zero")]
    ZeroColumn(usize),

    #[error("sample set is empty")]
    EmptySamples,

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
