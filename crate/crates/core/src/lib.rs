//! Diffusion-corrected model rollouts for offline reinforcement learning.
//!
//! A conditional trajectory denoiser, a single-step dynamics model and the
//! learning policy are composed to synthesize long, policy-consistent
//! rollouts that augment an offline dataset for a TD3+BC learner. A tabular
//! lab checks the compounding-error bounds that motivate the approach.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod policy;
mod jsonio;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod substrate;
pub mod theory;
pub mod world_models;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Network and optimizer at the precision used by the learned pipeline.
pub type Mlp64 = substrate::Mlp<f64>;
pub type Mlp32 = substrate::Mlp<f32>;
pub type Adam64 = substrate::AdamState<f64>;
