//! Dense 2-D tensor math with define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Graph`]; [`Graph::backward`]
//! replays it in reverse and hands back gradients keyed by [`ParamId`].
//! Parameters live outside the graph in a [`ParamStore`] and are only mutated
//! by the optimizer, never while a graph that references them is alive.

// `Real` is f32 under the `f32` feature, so casts to it are not no-ops.
#![allow(clippy::unnecessary_cast)]

mod dist;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod init;
mod optim;
mod params;
mod tensor;

pub use dist::Categorical;
pub use error::{NdError, Result};
pub use graph::{ConvGeom, Grads, Graph, Var, L2_EPS};
pub use init::{fan_in, orthogonal};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, StepStats};
pub use params::{ParamId, ParamStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

/// Scalar type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Tolerances that depend on the active precision.
pub mod tol {
    use crate::Real;

    /// Relative error allowed between analytic and finite-difference gradients.
    #[cfg(not(feature = "f32"))]
    pub const GRAD_REL: Real = 1e-4;
    #[cfg(feature = "f32")]
    pub const GRAD_REL: Real = 5e-2;

    /// Central-difference step.
    #[cfg(not(feature = "f32"))]
    pub const FD_STEP: Real = 1e-6;
    #[cfg(feature = "f32")]
    pub const FD_STEP: Real = 1e-2;

    /// Slack for identities that hold up to rounding (softmax sums, norms).
    #[cfg(not(feature = "f32"))]
    pub const IDENTITY: Real = 1e-9;
    #[cfg(feature = "f32")]
    pub const IDENTITY: Real = 1e-5;
}
