//! Conditional trajectory diffusion in the EDM parameterization.
//!
//! Windows are flattened into interleaved vectors `(s_0, a_0, ..., s_L)`.
//! The denoiser learns the next-state slots; at sampling time the first state
//! and the action slots are overwritten with the conditions after every
//! solver update.

mod denoiser;
mod oracle;
mod sampler;
mod schedule;
mod tensor;

pub use denoiser::{train_denoiser, Denoise, Denoiser, DenoiserReport, Preconditioning};
pub use oracle::AnalyticDenoiser;
pub use sampler::{sample_batch, sample_conditional, sample_conditional_batch, BatchSample, Conditioning};
pub use schedule::{edm_loss_weight, NoiseSchedule, SamplerConfig};
pub use tensor::{apply_conditions, TrajectoryLayout, TrajectoryTensor};
