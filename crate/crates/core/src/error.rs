use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: usize, reason: &'static str },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("fidelity undefined: output trace {0:e} is zero")]
    UndefinedFidelity(f64),
    #[error("degenerate POVM: efficiency must be positive")]
    DegeneratePovm,
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
