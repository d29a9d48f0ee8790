use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Td3BcAgent, Td3BcConfig};
use crate::diffusion::{Denoiser, SamplerConfig};
use crate::envs::{Dataset, Environment};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::rollout::{
    buffer_insert, dydiff_generate, dynamics_residual, sample_mixed, select, EnvDynamics, Policy,
    RolloutConfig, SyntheticBuffer,
};
use crate::world_models::{trajectory_return, Dynamics, RewardFn};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// Population standard deviation across episodes.
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Undiscounted return of `n_episodes` episodes; episode `i` draws its start
/// state and any environment noise from stream `(seed, i)`.
pub fn evaluate(policy: &dyn Policy, env: &dyn Environment, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let horizon = env.spec().horizon;
    let mut returns = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut r = rng::stream(seed, &[tag::EVAL, i as u64]);
        let mut s = env.reset(&mut r);
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = policy.act_batch(ndarray::ArrayView2::from_shape((1, s.len()), &s).map_err(|e| Error::Shape(e.to_string()))?)?;
            let step = env.step(&s, a.row(0).as_slice().expect("row"), &mut r)?;
            total += step.reward;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len().max(1) as f64;
    // Shifted by the first return so identical returns give exactly zero spread.
    let first = returns.first().copied().unwrap_or(0.0);
    let mean = first + returns.iter().map(|x| x - first).sum::<f64>() / n;
    let std = (returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { mean, std, returns })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Dydiff,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dydiff => "dydiff",
        }
    }
}

/// Pretrained models that synthesize data in dydiff mode.
pub struct Components<'a> {
    pub denoiser: &'a Denoiser,
    pub dynamics: &'a dyn Dynamics,
    pub reward: &'a dyn RewardFn,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub seed: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub bc_loss: f64,
    pub n_syn_transitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutMetrics {
    pub epoch: usize,
    pub n_generated: usize,
    pub n_filtered: usize,
    pub mean_predicted_return: f64,
    pub mean_dyn_residual_k0: f64,
    pub mean_dyn_residual_km: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub curve: Vec<EpochMetrics>,
    pub rollouts: Vec<RolloutMetrics>,
    pub agent: Td3BcAgent,
}

impl TrainingRun {
    /// Mean evaluation return over the last five epochs.
    pub fn final_score(&self) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(5)..];
        tail.iter().map(|m| m.eval_return_mean).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn rollout_round(
    agent: &Td3BcAgent,
    c: &Components,
    env: &dyn Environment,
    dataset_states: &Array2<f64>,
    cfg: &RolloutConfig,
    buffer: &mut SyntheticBuffer,
    epoch: usize,
    seed: u64,
) -> Result<RolloutMetrics> {
    let mut pick = rng::stream(seed, &[tag::ROLLOUT, epoch as u64]);
    let rows: Vec<usize> = (0..cfg.batch_size)
        .map(|_| pick.random_range(0..dataset_states.nrows()))
        .collect();
    let s0 = dataset_states.select(ndarray::Axis(0), &rows);
    let mut rngs: Vec<_> = (0..cfg.batch_size)
        .map(|k| rng::stream(seed, &[tag::ROLLOUT, epoch as u64, k as u64 + 1]))
        .collect();
    let generation = dydiff_generate(c.denoiser, &c.sampler, c.dynamics, agent, s0.view(), cfg.iterations, &mut rngs)?;
    let reference = EnvDynamics(env);
    let mut returns = Vec::with_capacity(generation.trajectories.len());
    let mut res0 = Vec::new();
    let mut res_m = Vec::new();
    for (t, seed_traj) in generation.trajectories.iter().zip(&generation.seeds) {
        returns.push(trajectory_return(c.reward, t.states.view(), t.actions.view())?);
        res0.push(dynamics_residual(&reference, seed_traj)?);
        res_m.push(dynamics_residual(&reference, t)?);
    }
    let kept = select(cfg.filter, &returns, cfg.eta, &mut pick);
    for &k in &kept {
        buffer_insert(buffer, &generation.trajectories[k], c.reward)?;
    }
    if generation.failures > 0 {
        log::warn!("epoch {epoch}: {} rollouts dropped", generation.failures);
    }
    Ok(RolloutMetrics {
        epoch,
        n_generated: generation.trajectories.len(),
        n_filtered: kept.len(),
        mean_predicted_return: mean(&returns),
        mean_dyn_residual_k0: mean(&res0),
        mean_dyn_residual_km: mean(&res_m),
    })
}

/// Train TD3+BC for `epochs` epochs. In dydiff mode, every `period` epochs
/// (starting at epoch 0) a batch of synthetic rollouts from the current
/// policy is generated, filtered and added to the synthetic buffer, and
/// training batches mix real and synthetic data; baseline mode trains on real
/// data only and never touches `components`.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    dataset: &Dataset,
    env: &dyn Environment,
    components: Option<&Components>,
    mode: Mode,
    rollout_cfg: &RolloutConfig,
    policy_cfg: &Td3BcConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainingRun> {
    rollout_cfg.validate()?;
    policy_cfg.validate()?;
    let spec = env.spec();
    if dataset.state_dim != spec.state_dim || dataset.action_dim != spec.action_dim {
        return Err(Error::Dimension {
            record: 0,
            message: format!("dataset dims ({}, {}) differ from env {}", dataset.state_dim, dataset.action_dim, spec.name),
        });
    }
    let components = match (mode, components) {
        (Mode::Baseline, _) => None,
        (Mode::Dydiff, None) => return Err(Error::MissingInput("dydiff mode needs pretrained components".into())),
        (Mode::Dydiff, Some(c)) => {
            let lay = c.denoiser.layout;
            if lay.state_dim != spec.state_dim || lay.action_dim != spec.action_dim {
                return Err(Error::Dimension {
                    record: 0,
                    message: format!("denoiser dims ({}, {}) differ from env", lay.state_dim, lay.action_dim),
                });
            }
            if lay.horizon != rollout_cfg.horizon {
                return Err(Error::Config(format!(
                    "rollout horizon {} differs from the denoiser window {}",
                    rollout_cfg.horizon, lay.horizon
                )));
            }
            Some(c)
        }
    };
    let real = dataset.transitions();
    if real.is_empty() {
        return Err(Error::InvalidArgument("dataset has no transitions".into()));
    }
    let mut agent = Td3BcAgent::new(spec, dataset.normalizer()?.clone(), policy_cfg.clone(), seed)?;
    let mut buffer = SyntheticBuffer::new(rollout_cfg.buffer_capacity);
    let alpha = if components.is_some() { rollout_cfg.alpha } else { 1.0 };
    let mut curve = Vec::with_capacity(epochs);
    let mut rollouts = Vec::new();
    for epoch in 0..epochs {
        if let Some(c) = components {
            if epoch % rollout_cfg.period == 0 {
                rollouts.push(rollout_round(&agent, c, env, &real.states, rollout_cfg, &mut buffer, epoch, seed)?);
            }
        }
        let mut r = rng::stream(seed, &[tag::POLICY, epoch as u64]);
        let (mut cl, mut al, mut bl, mut n_actor) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..policy_cfg.updates_per_epoch {
            let batch = sample_mixed(&real, &buffer, alpha, policy_cfg.batch_size, &mut r)?;
            let rep = agent.update(&batch, &mut r)?;
            cl += rep.critic_loss;
            if let (Some(a), Some(b)) = (rep.actor_loss, rep.bc_loss) {
                al += a;
                bl += b;
                n_actor += 1;
            }
        }
        let eval = evaluate(&agent, env, policy_cfg.eval_episodes, seed.wrapping_add(epoch as u64))?;
        let n_up = policy_cfg.updates_per_epoch.max(1) as f64;
        let na = n_actor.max(1) as f64;
        curve.push(EpochMetrics {
            epoch,
            mode,
            seed,
            eval_return_mean: eval.mean,
            eval_return_std: eval.std,
            critic_loss: cl / n_up,
            actor_loss: al / na,
            bc_loss: bl / na,
            n_syn_transitions: buffer.len(),
        });
        log::info!("{} seed {seed} epoch {epoch}: return {:.3}", mode.as_str(), eval.mean);
    }
    Ok(TrainingRun { curve, rollouts, agent })
}
