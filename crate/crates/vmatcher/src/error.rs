use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum VmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid statistics: {0}")]
    InvalidStatistics(String),
    #[error("pattern parse error at token {position}: unknown token {token:?}")]
    Parse { position: usize, token: String },
    #[error("weight archive error: {0}")]
    Archive(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type VmResult<T> = Result<T, VmError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> VmError {
    VmError::Shape {
        op,
        detail: detail.into(),
    }
}
