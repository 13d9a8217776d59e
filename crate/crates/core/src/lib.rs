//! Numerical toolkit for object-level 3D grounding experiments: box
//! geometry with exact gradients, IoU-gated sample selection, contrastive
//! and detection losses, a small differentiable-MLP kit, and the
//! evaluation metrics used by the benchmark harness.
//!
//! Everything numeric is generic over [`scalar::Real`] so kernels run in
//! `f32` or `f64`; the aliases below fix the common choices. Training and
//! the quoted tolerances assume `f64`.

pub mod contrastive;
pub mod diffkit;
pub mod filter;
pub mod geom;
pub mod metrics;
pub mod objectives;
pub mod scalar;

pub use scalar::Real;

/// Double-precision box, the default for training and verification.
pub type Aabb3d = geom::Aabb3<f64>;
/// Single-precision box for throughput-bound callers.
pub type Aabb3f = geom::Aabb3<f32>;
