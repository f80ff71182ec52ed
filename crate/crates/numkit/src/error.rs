use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumkitError {
    /// A tensor arrived with dimensions the operation cannot accept.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// A caller violated an API contract (empty batch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where the computation cannot continue.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file had an unknown version or a truncated/garbled layout.
    #[error("checkpoint format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NumkitError>;

impl NumkitError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        NumkitError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
