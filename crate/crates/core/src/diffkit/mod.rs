//! Minimal differentiable-computation substrate for the toy models: a
//! named parameter store with gradient accumulators, dense multilayer
//! perceptrons with reverse-mode gradients, momentum SGD, and a
//! finite-difference gradient checker.
//!
//! Reverse mode is written for this fixed computation shape (affine
//! chains, optional unit normalization, the loss heads in this crate),
//! not a general tape. Training math is expected to run in `f64`; the
//! tolerances quoted in the tests assume it.

mod check;
mod mlp;
mod store;

pub use check::{gradcheck, GradcheckConfig, GradcheckEntry, GradcheckReport};
pub use mlp::{
    init_mlp_params, mlp_backward, mlp_forward, normalize, normalize_backward, MlpCache, MlpSpec,
    Nonlinearity,
};
pub use store::{DiffError, Param, ParamStore};
