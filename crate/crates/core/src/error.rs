use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {num_labels} labels")]
    Label { label: u8, num_labels: u8 },
    #[error("{what} out of bounds: {detail}")]
    OutOfBounds { what: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nd(#[from] ndnum::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SegError>;
