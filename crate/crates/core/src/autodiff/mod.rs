//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Backward passes build ordinary graph nodes, so `grad` can be applied to
//! the result of `grad` (needed to train through a Jacobian trace).
//!
//! Broadcasting is limited to equal shapes or a single-element operand.
//! Row and column broadcasting is spelled out with
//! [`DiffNode::expand_axis`].

mod array;
mod grad;
mod node;

pub use array::Array;
pub use grad::{check_gradient, grad, relative_error, GradientReport, Gradients};
pub use node::{elementwise, is_grad_enabled, no_grad, reduce, with_grad, DiffNode, ElementwiseOp, ReduceOp};
