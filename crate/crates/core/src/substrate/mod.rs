//! Dense networks with exact reverse-mode gradients and an Adam optimizer.
//!
//! Every learned model in the crate (denoiser, dynamics, reward, actor and
//! critics) is an [`Mlp`] trained with [`AdamState`].

mod adam;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, ForwardCache, Mlp, MlpDoc, MlpGrads, MLP_FORMAT};
