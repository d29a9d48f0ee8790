//! TD3+BC: a deterministic actor regularized toward dataset actions, with
//! twin critics and delayed target updates.

mod train;

pub use train::{evaluate, run_training, Components, EpochMetrics, EvalReport, Mode, RolloutMetrics, TrainingRun};

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Normalizer};
use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::rng::{self, tag, Rng};
use crate::rollout::{MixedBatch, Policy};
use crate::substrate::{Activation, AdamConfig, AdamState, Mlp, MlpDoc};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Td3BcConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Target tracking rate: `target <- (1 - tau) target + tau online`.
    pub tau: f64,
    /// Target-smoothing noise, as a fraction of the action half-range.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    /// `c_bc` in `lambda = c_bc / mean|Q|`.
    pub bc_alpha: f64,
    pub batch_size: usize,
    pub updates_per_epoch: usize,
    pub eval_episodes: usize,
}

impl Default for Td3BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            bc_alpha: 2.5,
            batch_size: 256,
            updates_per_epoch: 1000,
            eval_episodes: 10,
        }
    }
}

impl Td3BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || self.policy_delay == 0 {
            return Err(Error::Config("hidden widths, batch_size and policy_delay must be positive".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("gamma must lie in [0, 1) and tau in [0, 1]".into()));
        }
        if self.policy_noise < 0.0 || self.noise_clip < 0.0 || self.bc_alpha < 0.0 {
            return Err(Error::Config("noise scales and bc_alpha must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Td3BcAgent {
    pub actor: Mlp<f64>,
    pub critics: [Mlp<f64>; 2],
    pub actor_target: Mlp<f64>,
    pub critic_targets: [Mlp<f64>; 2],
    pub config: Td3BcConfig,
    /// Input standardization for actor and critics.
    pub normalizer: Normalizer,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    actor_opt: AdamState<f64>,
    critic_opts: [AdamState<f64>; 2],
    updates: u64,
}

/// Losses from one update; actor terms are present only on delayed steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub bc_loss: Option<f64>,
}

impl Td3BcAgent {
    pub fn new(spec: &EnvSpec, normalizer: Normalizer, config: Td3BcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        if normalizer.state_dim() != sd || normalizer.action_dim() != ad {
            return Err(Error::Shape("normalizer dims differ from the environment".into()));
        }
        let sizes = |i: usize, o: usize| {
            let mut v = vec![i];
            v.extend_from_slice(&config.hidden);
            v.push(o);
            v
        };
        let base = seed ^ tag::POLICY;
        let actor = Mlp::init(&sizes(sd, ad), Activation::Relu, base)?.with_output_tanh(true);
        let c1 = Mlp::init(&sizes(sd + ad, 1), Activation::Relu, base.wrapping_add(1))?;
        let c2 = Mlp::init(&sizes(sd + ad, 1), Activation::Relu, base.wrapping_add(2))?;
        let adam = |lr| AdamConfig { lr, ..Default::default() };
        Ok(Self {
            actor_opt: AdamState::new(&actor, adam(config.actor_lr)),
            critic_opts: [
                AdamState::new(&c1, adam(config.critic_lr)),
                AdamState::new(&c2, adam(config.critic_lr)),
            ],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            config,
            normalizer,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn norm_states(&self, states: ArrayView2<f64>) -> Array2<f64> {
        let n = &self.normalizer;
        Array2::from_shape_fn(states.dim(), |(r, d)| (states[[r, d]] - n.state_mean[d]) / n.state_std[d])
    }

    fn half_range(&self, d: usize) -> f64 {
        0.5 * (self.action_high[d] - self.action_low[d])
    }

    /// Map tanh outputs in `[-1, 1]` onto the action box.
    fn scale(&self, squashed: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(squashed.dim(), |(r, d)| {
            let mid = 0.5 * (self.action_high[d] + self.action_low[d]);
            mid + self.half_range(d) * squashed[[r, d]]
        })
    }

    fn critic_input(&self, ns: &Array2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        concatenate(Axis(1), &[ns.view(), actions]).map_err(|e| Error::Shape(e.to_string()))
    }

    /// `pi(s)` in action units; pure.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.act_batch(s)?.into_raw_vec_and_offset().0)
    }

    /// `Q_1(s, a)` for a batch.
    pub fn q1(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let ns = self.norm_states(states);
        let q = self.critics[0].forward(self.critic_input(&ns, actions)?.view())?;
        Ok(q.column(0).to_vec())
    }

    /// Critic regression target `r + gamma (1 - done) min_j Q'_j(s', pi'(s') + eps)`.
    pub fn critic_targets_for(&self, batch: &MixedBatch, rng: &mut Rng) -> Result<Vec<f64>> {
        let c = &self.config;
        let nn = self.norm_states(batch.next_states.view());
        let mut next_a = self.scale(&self.actor_target.forward(nn.view())?);
        for ((_, d), v) in next_a.indexed_iter_mut() {
            let h = self.half_range(d);
            let eps = (c.policy_noise * h * rng::normal(rng)).clamp(-c.noise_clip * h, c.noise_clip * h);
            *v = (*v + eps).clamp(self.action_low[d], self.action_high[d]);
        }
        let input = self.critic_input(&nn, next_a.view())?;
        let q1 = self.critic_targets[0].forward(input.view())?;
        let q2 = self.critic_targets[1].forward(input.view())?;
        Ok((0..batch.rewards.len())
            .map(|r| {
                let boot = if batch.dones[r] { 0.0 } else { c.gamma * q1[[r, 0]].min(q2[[r, 0]]) };
                batch.rewards[r] + boot
            })
            .collect())
    }

    /// One TD3+BC step on `batch`. Non-finite losses abort before any
    /// parameter changes are applied for that network.
    pub fn update(&mut self, batch: &MixedBatch, rng: &mut Rng) -> Result<UpdateReport> {
        let b = batch.rewards.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let y = self.critic_targets_for(batch, rng)?;
        let ns = self.norm_states(batch.states.view());
        let input = self.critic_input(&ns, batch.actions.view())?;
        let mut critic_loss = 0.0;
        for j in 0..2 {
            let cache = self.critics[j].forward_cached(input.view())?;
            let q = cache.output();
            let mut up = Array2::zeros((b, 1));
            for r in 0..b {
                let e = q[[r, 0]] - y[r];
                critic_loss += e * e / b as f64;
                up[[r, 0]] = 2.0 * e / b as f64;
            }
            if !critic_loss.is_finite() {
                return Err(Error::Diverged {
                    step: self.updates as usize,
                    context: format!("critic {j} loss is {critic_loss}"),
                });
            }
            let (g, _) = self.critics[j].backward(&cache, up.view())?;
            self.critic_opts[j].step(&mut self.critics[j], &g)?;
        }
        self.updates += 1;
        let mut report = UpdateReport {
            critic_loss,
            actor_loss: None,
            bc_loss: None,
        };
        if self.updates.is_multiple_of(self.config.policy_delay) {
            let (actor_loss, bc_loss) = self.actor_step(batch, &ns, self.config.bc_alpha)?;
            report.actor_loss = Some(actor_loss);
            report.bc_loss = Some(bc_loss);
            let keep = 1.0 - self.config.tau;
            self.actor_target.polyak_from(&self.actor, keep);
            for j in 0..2 {
                self.critic_targets[j].polyak_from(&self.critics[j], keep);
            }
        }
        Ok(report)
    }

    /// Minimize `-lambda mean Q_1(s, pi(s)) + mean |pi(s) - a|^2` with
    /// `lambda = bc_alpha / mean|Q_1|`. Returns the total and the BC term.
    pub fn actor_step(&mut self, batch: &MixedBatch, ns: &Array2<f64>, bc_alpha: f64) -> Result<(f64, f64)> {
        let b = batch.rewards.len() as f64;
        let ad = self.action_low.len();
        let cache = self.actor.forward_cached(ns.view())?;
        let pi = self.scale(cache.output());
        let cin = self.critic_input(ns, pi.view())?;
        let ccache = self.critics[0].forward_cached(cin.view())?;
        let q = ccache.output().column(0).to_owned();
        let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / b;
        let lambda = if bc_alpha == 0.0 { 0.0 } else { bc_alpha / mean_abs.max(1e-12) };
        let (_, dq_din) = self.critics[0].backward(&ccache, Array2::from_elem((q.len(), 1), 1.0).view())?;
        let dq_da = dq_din.slice(s![.., ns.ncols()..]);
        let mut bc = 0.0;
        let mut up = Array2::zeros(pi.dim());
        for r in 0..pi.nrows() {
            for d in 0..ad {
                let diff = pi[[r, d]] - batch.actions[[r, d]];
                bc += diff * diff / b;
                let da = -lambda * dq_da[[r, d]] / b + 2.0 * diff / b;
                up[[r, d]] = da * self.half_range(d);
            }
        }
        let loss = -lambda * q.sum() / b + bc;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.updates as usize,
                context: format!("actor loss is {loss}"),
            });
        }
        let (g, _) = self.actor.backward(&cache, up.view())?;
        self.actor_opt.step(&mut self.actor, &g)?;
        Ok((loss, bc))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &AgentDoc {
                kind: "td3bc".into(),
                actor: self.actor.to_doc(),
                critics: [self.critics[0].to_doc(), self.critics[1].to_doc()],
                normalizer: self.normalizer.clone(),
                action_low: self.action_low.clone(),
                action_high: self.action_high.clone(),
                config: self.config.clone(),
            },
            path.as_ref(),
        )
    }

    /// Restore a saved agent for acting; optimizer state is not persisted,
    /// and targets start equal to the online networks.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: AgentDoc = read_json(path.as_ref())?;
        if doc.kind != "td3bc" {
            return Err(Error::Parse {
                record: 0,
                message: format!("expected kind \"td3bc\", found {:?}", doc.kind),
            });
        }
        let actor = Mlp::from_doc(&doc.actor)?;
        let c1 = Mlp::from_doc(&doc.critics[0])?;
        let c2 = Mlp::from_doc(&doc.critics[1])?;
        let adam = |lr| AdamConfig { lr, ..Default::default() };
        Ok(Self {
            actor_opt: AdamState::new(&actor, adam(doc.config.actor_lr)),
            critic_opts: [
                AdamState::new(&c1, adam(doc.config.critic_lr)),
                AdamState::new(&c2, adam(doc.config.critic_lr)),
            ],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            config: doc.config,
            normalizer: doc.normalizer,
            action_low: doc.action_low,
            action_high: doc.action_high,
            updates: 0,
        })
    }
}

impl Policy for Td3BcAgent {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.normalizer.state_dim() {
            return Err(Error::Shape(format!(
                "policy expects state dim {}, got {}",
                self.normalizer.state_dim(),
                states.ncols()
            )));
        }
        let ns = self.norm_states(states);
        Ok(self.scale(&self.actor.forward(ns.view())?))
    }
}

#[derive(Serialize, Deserialize)]
struct AgentDoc {
    kind: String,
    actor: MlpDoc,
    critics: [MlpDoc; 2],
    normalizer: Normalizer,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    config: Td3BcConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use rand::Rng as _;

    fn agent(cfg: Td3BcConfig) -> Td3BcAgent {
        let env = make_env("pointmass").unwrap();
        Td3BcAgent::new(env.spec(), Normalizer::identity(4, 2), cfg, 0).unwrap()
    }

    fn small() -> Td3BcConfig {
        Td3BcConfig {
            hidden: vec![16, 16],
            ..Default::default()
        }
    }

    fn batch(n: usize, seed: u64, done: bool) -> MixedBatch {
        let mut r = rng::stream(seed, &[]);
        let mut u = |_| r.random_range(-1.0..1.0);
        MixedBatch {
            states: Array2::from_shape_fn((n, 4), &mut u),
            actions: Array2::from_shape_fn((n, 2), &mut u),
            rewards: (0..n).map(|i| i as f64 * 0.1 - 1.0).collect(),
            next_states: Array2::from_shape_fn((n, 4), &mut u),
            dones: vec![done; n],
            n_real: n,
        }
    }

    #[test]
    fn zero_actor_acts_at_midpoint() {
        let mut a = agent(small());
        a.actor.zero_params();
        assert_eq!(a.act(&[0.3, -0.2, 1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn actions_respect_bounds() {
        let mut a = agent(small());
        for w in &mut a.actor.weights {
            w.mapv_inplace(|v| v * 50.0);
        }
        let mut r = rng::stream(1, &[]);
        let states = Array2::from_shape_fn((10_000, 4), |_| r.random_range(-100.0..100.0));
        let acts = a.act_batch(states.view()).unwrap();
        assert!(acts.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.act_batch(states.view()).unwrap(), acts);
    }

    #[test]
    fn discount_zero_targets_reward() {
        let a = agent(Td3BcConfig { gamma: 0.0, ..small() });
        let b = batch(8, 2, false);
        let mut r = rng::stream(0, &[]);
        assert_eq!(a.critic_targets_for(&b, &mut r).unwrap(), b.rewards);
    }

    #[test]
    fn terminal_rows_do_not_bootstrap() {
        let a = agent(small());
        let b = batch(8, 2, true);
        let mut r = rng::stream(0, &[]);
        assert_eq!(a.critic_targets_for(&b, &mut r).unwrap(), b.rewards);
    }

    #[test]
    fn bc_term_vanishes_on_own_actions() {
        let mut a = agent(small());
        let mut b = batch(8, 3, false);
        b.actions = a.act_batch(b.states.view()).unwrap();
        let ns = a.norm_states(b.states.view());
        let (_, bc) = a.actor_step(&b, &ns, 2.5).unwrap();
        assert_eq!(bc, 0.0);
    }

    #[test]
    fn targets_track_by_polyak() {
        let mut a = agent(small());
        let b = batch(16, 4, false);
        let mut r = rng::stream(0, &[]);
        a.update(&b, &mut r).unwrap();
        let old_target = a.critic_targets[0].flat_params();
        a.update(&b, &mut r).unwrap();
        let online = a.critics[0].flat_params();
        let keep = 1.0 - a.config.tau;
        for ((t, o), new) in old_target.iter().zip(&online).zip(a.critic_targets[0].flat_params()) {
            assert_eq!(new, keep * t + (1.0 - keep) * o);
        }
    }

    #[test]
    fn pure_bc_loss_decreases() {
        let mut a = agent(Td3BcConfig { actor_lr: 1e-3, ..small() });
        let b = batch(10, 5, false);
        let ns = a.norm_states(b.states.view());
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (loss, bc) = a.actor_step(&b, &ns, 0.0).unwrap();
            assert_eq!(loss, bc);
            assert!(bc <= prev + 1e-12, "{bc} > {prev}");
            prev = bc;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = agent(small());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agent.json");
        a.save(&p).unwrap();
        let b = Td3BcAgent::load(&p).unwrap();
        assert_eq!(b.actor, a.actor);
        assert_eq!(b.critics, a.critics);
    }
}
