use thiserror::Error;

use crate::tape::Shape;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Shape),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
