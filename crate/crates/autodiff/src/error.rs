use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("masked_softmax: row {row} is fully masked")]
    InvalidMask { row: usize },
    #[error("invalid target distribution: {0}")]
    InvalidTarget(String),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },
    #[error("non-finite function value during evaluation: {0}")]
    NonFinite(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}
