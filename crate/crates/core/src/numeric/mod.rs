//! Dense tensors, tape-based reverse-mode differentiation, Adam, and gradient
//! verification. Everything is `f64`.

pub mod adam;
pub mod functional;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use functional::{cross_entropy, cross_entropy_soft, dropout, softmax, CrossEntropy, CE_FLOOR};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, Objective};
pub use tape::{Tape, Var};
pub use tensor::{Gradients, ParamId, ParamSet, Tensor};

/// Convenience: run `backward` from a scalar node.
pub fn backward(tape: &Tape, output: Var, params: &ParamSet) -> crate::Result<Gradients> {
    tape.backward(output, params)
}
