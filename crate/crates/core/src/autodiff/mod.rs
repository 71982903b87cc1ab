//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use tape::{softmax_last_axis, BackwardFn, Padding, Tape, Unary, Var};
