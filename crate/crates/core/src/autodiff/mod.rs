//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records forward operations as they run; [`Tape::backward`]
//! sweeps them in reverse and returns [`Gradients`] for every tracked leaf.
//! [`grad_check`] compares those gradients with central differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{Axis, BinaryKind, CustomOp, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;
