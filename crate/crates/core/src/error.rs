use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty basis request")]
    EmptyBasis,

    #[error("not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Power iteration ran out of iterations. `best` is the last iterate,
    /// which callers may accept.
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        best: DVector<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("more buckets than samples (k = {k}, n = {n})")]
    MoreBucketsThanSamples { k: usize, n: usize },

    #[error("insufficient samples per bucket (n = {n}, k = {k}; need n >= 2k)")]
    InsufficientSamples { n: usize, k: usize },

    #[error("covariance does not exist: {0}")]
    CovarianceDoesNotExist(String),

    #[error("oracle restricted to low dimension (effective dimension {0} > 3)")]
    OracleDimension(usize),

    #[error("degenerate relaxation: v-block is numerically zero")]
    DegenerateRelaxation,

    #[error("unknown estimator `{name}`; available: {}", available.join(", "))]
    UnknownEstimator {
        name: String,
        available: Vec<&'static str>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
