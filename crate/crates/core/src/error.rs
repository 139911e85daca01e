use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

/// Errors raised by tensor and graph operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    /// Operations never propagate NaN/Inf silently; the first producer fails.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl CoreError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;
