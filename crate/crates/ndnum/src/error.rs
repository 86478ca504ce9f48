use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-length dimension")]
    EmptyDim(Vec<usize>),
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NdError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NdError::Shape {
        op,
        detail: detail.into(),
    })
}
