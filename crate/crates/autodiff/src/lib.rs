//! Dense row-major `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns a [`Gradients`] table keyed by [`Var`].

mod attention;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use attention::{AttentionLayout, MacCounter};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use optim::{AdamState, AdamW, LrSchedule};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
