//! Minimal dense tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Parameters
//! are registered as leaves at the start of each forward pass and
//! [`Tape::backward`] returns their gradients. Tapes are single-threaded;
//! independent tapes may run concurrently.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_inputs, relative_error, GradCheck, GradCheckReport, KINK_TOL,
};
pub use real::Real;
pub use tape::{Gradients, Reduction, Tape, Var, MASK_VALUE};
pub use tensor::Tensor;
