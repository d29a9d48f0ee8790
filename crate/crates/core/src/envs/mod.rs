//! Toy control environments, offline dataset collection and persistence,
//! and the fixed-length window constructor used to train the denoiser.

mod dataset;
mod pointmass;
mod windows;

pub use dataset::{
    collect_dataset, load_dataset, mix_assignment, parse_dataset, save_dataset, CollectRecipe,
    Dataset, Episode, MixComponent, Normalizer, Transitions, DATASET_FORMAT,
};
pub use pointmass::{InitDist, PointMass};
pub use windows::{slice_windows, window_count, Window};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Episode step limit.
    pub horizon: usize,
    /// Upper bound on `|r(s, a)|`.
    pub reward_bound: f64,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True terminal (goal reached), not time-limit truncation.
    pub done: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draw an initial state from d_0.
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step>;

    /// Behavior controller used to collect offline data, with Gaussian action
    /// noise of standard deviation `noise`.
    fn behavior_action(&self, state: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64>;
}

/// Construct an environment by registry name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "pointmass" => Ok(Box::new(PointMass::default())),
        "pointmass-fixed" => Ok(Box::new(PointMass::with_fixed_start([-1.5, -1.5]))),
        other => Err(Error::Config(format!("unknown environment {other:?}"))),
    }
}
