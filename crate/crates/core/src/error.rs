use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged at step {step}: loss {loss} ({detail})")]
    Training { step: usize, loss: f64, detail: String },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}
