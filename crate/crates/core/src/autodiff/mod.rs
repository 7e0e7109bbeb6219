//! Dense tensors with tape-based reverse-mode differentiation, parameter
//! stores, Adam, and finite-difference gradient checking.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, rel_error, GradCheckReport, GradMismatch, MAX_CHECK_VALUES, REL_ERROR_FLOOR};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Tape, Var, LN_EPS, MASK_NEG};
pub use tensor::Tensor;
