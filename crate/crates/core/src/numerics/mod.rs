//! Dense tensors, the differentiation tape, and the gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    frobenius_norm, gated_unit, layer_norm, outer, sigmoid, softmax_rows, softplus, Tensor,
};

/// Layer-normalization epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
