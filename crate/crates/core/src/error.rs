use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("rejection sampler gave up after {0} consecutive rejections")]
    AcceptanceTooLow(usize),

    #[error("information vector requested at t = 0")]
    WindowUnderflow,

    #[error("innovation covariance is numerically singular (condition {0:e})")]
    SingularInnovation(f64),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("problem is infeasible (phase-1 residual {0:e})")]
    Infeasible(f64),

    #[error("solver hit the iteration limit ({iterations}) with residuals primal {primal:e}, dual {dual:e}")]
    MaxIterations {
        iterations: usize,
        primal: f64,
        dual: f64,
        /// Best iterate found before giving up.
        best: Vec<f64>,
    },

    #[error("training diverged at epoch {0}")]
    Diverged(usize),

    #[error("need at least {required} verification samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("weight file rejected: {0}")]
    BadWeights(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
