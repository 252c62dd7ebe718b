use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("backward target must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for {op} (limit {limit})")]
    Index { op: &'static str, index: usize, limit: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    /// Failure inside a caller-supplied function (for example a loss
    /// closure handed to `grad_check`).
    #[error("{0}")]
    External(String),
}

impl From<std::io::Error> for AutodiffError {
    fn from(e: std::io::Error) -> Self {
        AutodiffError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape { op, detail: detail.into() })
}
