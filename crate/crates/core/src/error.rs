//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Failure categories for tensor math and the layers above it.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Shapes or axes disagree (matmul inner dims, invalid reduction axis, ...).
    Dimension(String),
    /// A numeric-domain constraint was violated (log of a non-positive value,
    /// division by zero, zero-norm vector in a cosine similarity, ...).
    Domain(String),
    /// A caller broke an operation contract (empty batch, non-scalar loss,
    /// index out of range, mismatched noise kind, ...).
    Contract(String),
    /// A NaN or infinity was produced; `op` names the first offending
    /// operation on the tape.
    NonFinite { op: &'static str, detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension(msg) => write!(f, "dimension error: {msg}"),
            CoreError::Domain(msg) => write!(f, "numeric-domain error: {msg}"),
            CoreError::Contract(msg) => write!(f, "contract error: {msg}"),
            CoreError::NonFinite { op, detail } => {
                write!(f, "non-finite value produced by `{op}`: {detail}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
