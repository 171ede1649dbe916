//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass. Each recorded value is addressed by a
//! [`Var`]; after [`Tape::backward`] the tape holds a gradient buffer for every
//! node that requires one. Trainable tensors live in a [`ParamStore`] and are
//! read in place by the tape.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Reduction, Tape, Var};
pub use tensor::Tensor;
