use thiserror::Error;

/// Errors produced by the numerical library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} outside valid domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("correlation matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("Riccati solution exceeded blow-up threshold {threshold} at t = {t}")]
    BlowUp { t: f64, threshold: f64 },

    #[error("terminal Riccati value must be negative, got {0}")]
    InvalidTerminal(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("matrix norm {0} too large for matrix exponential")]
    MatExpOverflow(f64),

    #[error("OU estimation failed: {0}")]
    EstimationFailed(String),

    #[error("simulation produced non-finite values: {0}")]
    NonFinite(String),

    #[error("PDE solver diverged at step {step} (growth factor {growth})")]
    PdeDiverged { step: usize, growth: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
