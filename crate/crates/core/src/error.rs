use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },
    #[error("depth {requested} exceeds available depth {available}")]
    DepthRange { requested: usize, available: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("insufficient data: need at least {needed} rows, got {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] rq_autodiff::AutodiffError),
}
