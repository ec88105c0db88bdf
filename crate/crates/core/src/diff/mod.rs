//! Minimal dense differentiable compute: tensors, a reverse-mode tape,
//! MLPs, layer normalization, Adam, and a finite-difference checker.

mod adam;
mod check;
mod nn;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use check::{grad_check, grad_check_with, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use nn::{kaiming_uniform, Activation, MlpSpec};
pub use tape::{sigmoid, GatherCsr, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::{ParamStore, Tensor};
