use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch at layer {layer}: expected {expected}, found {found}")]
    DimensionMismatch {
        layer: usize,
        expected: String,
        found: String,
    },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("zero input: {0}")]
    ZeroInput(String),

    #[error("power iteration did not converge after {iters} iterations (last estimate {estimate})")]
    NoConvergence { iters: usize, estimate: f64 },

    #[error("blow-up fit needs at least {needed} samples past the threshold, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("no positive-value KKT point found after {attempts} attempts")]
    NoPositiveKkt { attempts: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
