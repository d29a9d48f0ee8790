use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::envs::{make_env, CollectRecipe};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::jsonio::read_text;
use crate::policy::Td3BcConfig;
use crate::rollout::{FilterKind, RolloutConfig};
use crate::theory::{BoundParams, SweepConfig};

/// Every knob of an experiment in one flat, versioned JSON object. Absent
/// keys take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    /// Dataset file; defaults to the `gen-data` output in `out_dir`.
    pub dataset_path: Option<PathBuf>,
    /// `(behavior noise, fraction)` pairs.
    pub mix: Vec<(f64, f64)>,
    pub num_episodes: usize,

    pub window: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,

    pub world_epochs: usize,
    pub world_batch: usize,
    pub world_hidden: Vec<usize>,
    pub world_lr: f64,
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_hidden: Vec<usize>,
    pub diffusion_lr: f64,
    pub holdout: f64,

    pub policy_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    pub bc_alpha: f64,
    pub policy_batch: usize,
    pub updates_per_epoch: usize,
    pub eval_episodes: usize,
    pub epochs: usize,

    pub iterations: usize,
    pub rollout_batch: usize,
    pub eta: f64,
    pub filter: FilterKind,
    pub alpha: f64,
    pub rollout_period: usize,
    pub buffer_capacity: usize,

    pub theory_instances: usize,
    pub theory_states: usize,
    pub theory_actions: usize,
    pub theory_gamma: f64,
    pub theory_beta_max: f64,
    pub theory_horizon: usize,

    pub eq15_c: f64,
    pub eq15_eps_sd: f64,
    pub eq15_eps_m: f64,
    pub eq15_horizon: usize,
    pub eq15_max_k: u32,

    pub mse_starts: usize,
    pub mse_horizons: Vec<usize>,

    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::default();
        let sampler = SamplerConfig::default();
        let world = FitConfig::default();
        let policy = Td3BcConfig::default();
        let rollout = RolloutConfig::default();
        let sweep = SweepConfig::default();
        Self {
            env: "pointmass".into(),
            dataset_path: None,
            mix: vec![(1.0, 0.25), (0.6, 0.25), (0.3, 0.25), (0.1, 0.25)],
            num_episodes: 100,
            window: rollout.horizon,
            sigma_min: schedule.sigma_min,
            sigma_max: schedule.sigma_max,
            sigma_data: schedule.sigma_data,
            rho: schedule.rho,
            n_steps: schedule.n_steps,
            p_mean: schedule.p_mean,
            p_std: schedule.p_std,
            s_churn: sampler.s_churn,
            s_noise: sampler.s_noise,
            s_tmin: sampler.s_tmin,
            s_tmax: sampler.s_tmax,
            world_epochs: world.epochs,
            world_batch: world.batch_size,
            world_hidden: world.hidden.clone(),
            world_lr: world.lr,
            diffusion_epochs: 100,
            diffusion_batch: 64,
            diffusion_hidden: vec![256, 256, 256],
            diffusion_lr: 1e-3,
            holdout: world.holdout,
            policy_hidden: policy.hidden.clone(),
            actor_lr: policy.actor_lr,
            critic_lr: policy.critic_lr,
            gamma: policy.gamma,
            tau: policy.tau,
            policy_noise: policy.policy_noise,
            noise_clip: policy.noise_clip,
            policy_delay: policy.policy_delay,
            bc_alpha: policy.bc_alpha,
            policy_batch: policy.batch_size,
            updates_per_epoch: policy.updates_per_epoch,
            eval_episodes: policy.eval_episodes,
            epochs: 100,
            iterations: rollout.iterations,
            rollout_batch: rollout.batch_size,
            eta: rollout.eta,
            filter: rollout.filter,
            alpha: rollout.alpha,
            rollout_period: rollout.period,
            buffer_capacity: rollout.buffer_capacity,
            theory_instances: sweep.instances,
            theory_states: sweep.n_states,
            theory_actions: sweep.n_actions,
            theory_gamma: sweep.gamma,
            theory_beta_max: sweep.beta_max,
            theory_horizon: sweep.horizon,
            eq15_c: 0.5,
            eq15_eps_sd: 0.01,
            eq15_eps_m: 0.1,
            eq15_horizon: 10,
            eq15_max_k: 10,
            mse_starts: 50,
            mse_horizons: vec![1, 5, 10, 25, 50, 75, 100],
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            sigma_data: self.sigma_data,
            rho: self.rho,
            n_steps: self.n_steps,
            p_mean: self.p_mean,
            p_std: self.p_std,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            s_churn: self.s_churn,
            s_noise: self.s_noise,
            s_tmin: self.s_tmin,
            s_tmax: self.s_tmax,
        }
    }

    pub fn recipe(&self, seed: u64) -> CollectRecipe {
        CollectRecipe::new(&self.mix, self.num_episodes, seed)
    }

    pub fn world_fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.world_epochs,
            batch_size: self.world_batch,
            hidden: self.world_hidden.clone(),
            lr: self.world_lr,
            holdout: self.holdout,
        }
    }

    pub fn diffusion_fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.diffusion_epochs,
            batch_size: self.diffusion_batch,
            hidden: self.diffusion_hidden.clone(),
            lr: self.diffusion_lr,
            holdout: self.holdout,
        }
    }

    pub fn td3bc(&self) -> Td3BcConfig {
        Td3BcConfig {
            hidden: self.policy_hidden.clone(),
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            gamma: self.gamma,
            tau: self.tau,
            policy_noise: self.policy_noise,
            noise_clip: self.noise_clip,
            policy_delay: self.policy_delay,
            bc_alpha: self.bc_alpha,
            batch_size: self.policy_batch,
            updates_per_epoch: self.updates_per_epoch,
            eval_episodes: self.eval_episodes,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.window,
            iterations: self.iterations,
            batch_size: self.rollout_batch,
            eta: self.eta,
            filter: self.filter,
            alpha: self.alpha,
            period: self.rollout_period,
            buffer_capacity: self.buffer_capacity,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            instances: self.theory_instances,
            n_states: self.theory_states,
            n_actions: self.theory_actions,
            gamma: self.theory_gamma,
            beta_max: self.theory_beta_max,
            horizon: self.theory_horizon,
        }
    }

    /// Parameters of the iterated-correction table; the contraction is
    /// carried entirely by `c_pi`.
    pub fn eq15_params(&self) -> BoundParams {
        BoundParams {
            gamma: self.theory_gamma,
            reward_bound: 1.0,
            eps_m: self.eq15_eps_m,
            eps_d: 0.0,
            eps_sd: self.eq15_eps_sd,
            c_pi: self.eq15_c,
            c_ad: 1.0,
            horizon: self.eq15_horizon,
        }
    }

    /// Check every field against the preconditions of the module it feeds.
    pub fn validate(&self) -> Result<()> {
        make_env(&self.env)?;
        self.recipe(0).validate()?;
        self.schedule().validate()?;
        self.sampler().validate()?;
        self.world_fit().validate()?;
        self.diffusion_fit().validate()?;
        self.td3bc().validate()?;
        self.rollout().validate()?;
        self.sweep().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.mse_starts == 0 || self.mse_horizons.contains(&0) {
            return Err(Error::Config("mse_starts and mse_horizons must be positive".into()));
        }
        self.eq15_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_file(&self, seed: u64) -> PathBuf {
        self.dataset_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("gen-data_{seed}.jsonl")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::parse(r#"{"epochz": 3}"#), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"eta": 0.0}"#,
            r#"{"alpha": 2.0}"#,
            r#"{"mix": [[0.1, 0.5]]}"#,
            r#"{"sigma_min": 100.0}"#,
            r#"{"env": "hopper"}"#,
            r#"{"seeds": []}"#,
            r#"{"mse_horizons": [0, 5]}"#,
            r#"{"eq15_c": -1.0}"#,
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = ExperimentConfig::parse(r#"{"epochs": 3, "filter": "softmax"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.filter, FilterKind::Softmax);
        assert_eq!(cfg.window, 100);
    }
}
