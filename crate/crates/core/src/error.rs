use thiserror::Error;

pub type Result<T> = std::result::Result<T, PdiError>;

#[derive(Debug, Error)]
pub enum PdiError {
    #[error("non-finite numeric input at flat index {index}")]
    NumericInput { index: usize },

    #[error("invalid prompt input: {0}")]
    ParseInput(String),

    #[error("parse error at token {index} ({token:?}): {reason}")]
    Parse {
        index: usize,
        token: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range ({valid})")]
    Index { index: usize, valid: String },

    #[error("attention shape mismatch: expected {expected}, got {got}")]
    AttentionShape { expected: String, got: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid token span: {0}")]
    Span(String),

    #[error("degenerate attention map: {0}")]
    DegenerateMap(String),

    #[error("invalid component box: {0}")]
    Box(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PdiError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }
}
