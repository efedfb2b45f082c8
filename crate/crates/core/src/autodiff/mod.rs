//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_params, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: [usize; 2], len: usize },
    #[error("{op:?} produced a non-finite value")]
    NonFiniteValue { op: OpKind },
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("{op:?} needs at least one input")]
    EmptyInput { op: OpKind },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("tape has already been consumed by backward")]
    TapeConsumed,
    #[error("loss must be 1x1, got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}
