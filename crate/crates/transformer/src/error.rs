use rq_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("code {code} at ({t}, {d}) is outside [0, {k})")]
    CodeRange { t: usize, d: usize, code: usize, k: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error(transparent)]
    Core(#[from] rq_core::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
