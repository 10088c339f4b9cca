use thiserror::Error;

/// Errors raised by tensor construction, tape operations and layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Operand shapes or layer geometry do not agree.
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },
    /// An operation was invoked in a state that does not allow it.
    #[error("state error: {0}")]
    State(String),
    /// A value left its admissible numeric range.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
