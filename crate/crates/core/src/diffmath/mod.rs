//! Dense `f64` tensors with a reverse-mode tape covering the operations the
//! report model needs, plus a finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, relative_error, FD_STEP};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::dot;
