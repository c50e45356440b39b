//! PPO with achievement distillation on achievement gridworlds.

// `Real` is f32 under the `f32` feature, so casts to it are not no-ops.
#![allow(clippy::unnecessary_cast)]

pub mod distill;
pub mod env;
pub mod error;
pub mod harness;
pub mod net;
pub mod ot;
pub mod ppo;
pub mod trajectory;

pub use error::{Error, Result};
