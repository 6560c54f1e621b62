//! Deterministic reverse-mode differentiation over dense `f64` tensors.

mod sgd;
mod tape;
mod tensor;

pub use sgd::SgdState;
pub use tape::{argmax_first, sigmoid, softmax_rows, Tape, Var};
pub use tensor::Tensor;
