//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; primitives append nodes and return [`Var`]
//! handles. [`Tape::backward`] replays the tape in reverse from a scalar
//! loss. [`finite_difference_check`] verifies the result numerically.

mod attention;
mod check;
mod error;
mod tape;
mod tensor;

pub use attention::{batched_attention, scaled_dot_attention};
pub use check::{finite_difference_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
