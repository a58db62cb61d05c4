use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("feedback map did not converge at x={x:?}, p={p:?} (residual {residual:e})")]
    Feedback {
        x: Vec<f64>,
        p: Vec<f64>,
        residual: f64,
    },
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("model does not provide third-order derivatives")]
    MissingThirdOrder,
    #[error("no admissible delta_1 in (0,1): margin at delta_1 -> 0 is {0}")]
    DeltaCondition(f64),
    #[error("riccati blow-up at t={0}")]
    RiccatiBlowUp(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
