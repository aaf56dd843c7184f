//! Dense linear algebra, activations, and reverse-mode gradients.
//!
//! Everything in this module is hand-rolled on plain `Vec` storage: the
//! encoder needs only matmul, row softmax, two activations, layer norm, and
//! a tape that can differentiate through them.

mod gradcheck;
mod matrix;
mod scalar;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{prelu, sigmoid, swish, swish_derivative, Matrix};
pub use scalar::{real, Precision, Scalar};
pub use tape::{Gradients, Tape, ValueId};
