use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid compressor spec: {0}")]
    InvalidCompressor(String),

    #[error("cannot calibrate {kind} to omega = {target}: {reason}")]
    Calibration {
        kind: String,
        target: f64,
        reason: String,
    },

    #[error("no closed-form covariance for {0}")]
    UnsupportedFormula(String),

    #[error("hessian is singular (smallest eigenvalue {0:e})")]
    SingularHessian(f64),

    #[error("step-size precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("iterates diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
