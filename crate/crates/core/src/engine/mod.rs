//! Dense tensors, reverse-mode differentiation, gradient checking and Adam.
//!
//! All computation is in `f64`. A [`Tape`] is built afresh for every
//! forward pass; parameters live in a [`ParamStore`] and are bound onto the
//! tape at the start of each pass.

mod adam;
mod grad_check;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad_check::{grad_check, grad_check_sampled, rel_err, GradCheckReport};
pub use params::{conv_kernel, fan_in_uniform, Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
