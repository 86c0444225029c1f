use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Result<T> {
    Err(NnError::Shape {
        op,
        expected: expected.into(),
        got: got.to_vec(),
    })
}
