//! Synthetic rollout generation: autoregressive seeding with the dynamics
//! model, alternating diffusion resampling and policy relabeling, return
//! filters, and the replay buffers the learner draws from.

mod buffer;
mod filter;

pub use buffer::{buffer_insert, sample_mixed, MixedBatch, SyntheticBuffer, Transition};
pub use filter::{filter_hardmax, filter_softmax, select, FilterKind};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_conditional_batch, Denoiser, SamplerConfig};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::world_models::Dynamics;

/// A deterministic policy over raw-unit states.
pub trait Policy: Sync {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Closure policies, mostly for tests and scripted controllers.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = states
            .outer_iter()
            .map(|s| (self.0)(&s.to_vec()))
            .collect();
        let a = rows.first().map_or(0, |r| r.len());
        Array2::from_shape_vec((rows.len(), a), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// The environment's own transition function viewed as a dynamics model.
/// Only meaningful for deterministic environments.
pub struct EnvDynamics<'a>(pub &'a dyn Environment);

impl Dynamics for EnvDynamics<'_> {
    fn predict_next_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let mut rng = rng::stream(0, &[]);
        let mut out = Array2::zeros(states.dim());
        for (r, (s, a)) in states.outer_iter().zip(actions.outer_iter()).enumerate() {
            let step = self.0.step(&s.to_vec(), &a.to_vec(), &mut rng)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&step.next_state));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Rollout length `L`; must equal the denoiser's window length.
    pub horizon: usize,
    /// Number of denoise-and-relabel rounds `M`.
    pub iterations: usize,
    /// Initial states per rollout round, `B_r`.
    pub batch_size: usize,
    /// Fraction of generated trajectories kept by the filter.
    pub eta: f64,
    pub filter: FilterKind,
    /// Fraction of each training batch drawn from real data.
    pub alpha: f64,
    /// Policy-training epochs between rollout rounds.
    pub period: usize,
    pub buffer_capacity: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            iterations: 3,
            batch_size: 64,
            eta: 0.5,
            filter: FilterKind::Hardmax,
            alpha: 0.6,
            period: 10,
            buffer_capacity: 100_000,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 || self.period == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config(
                "horizon, batch_size, period and buffer_capacity must be positive".into(),
            ));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `L + 1` states and `L` actions in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }
}

fn row_finite(x: &Array2<f64>, r: usize) -> bool {
    x.row(r).iter().all(|v| v.is_finite())
}

/// Roll every start state forward `horizon` steps with `a_i = pi(s_i)` and
/// `s_{i+1} = f(s_i, a_i)`. A row that turns non-finite yields `Err` with the
/// step index; other rows are unaffected.
pub fn autoregressive_batch(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    s0: ArrayView2<f64>,
    horizon: usize,
) -> Result<Vec<Result<Trajectory>>> {
    let (b, sd) = s0.dim();
    let mut states = vec![s0.to_owned()];
    let mut actions: Vec<Array2<f64>> = Vec::with_capacity(horizon);
    let mut failed: Vec<Option<usize>> = (0..b)
        .map(|r| (!s0.row(r).iter().all(|v| v.is_finite())).then_some(0))
        .collect();
    for i in 0..horizon {
        let mut cur = states[i].clone();
        for (r, f) in failed.iter().enumerate() {
            if f.is_some() {
                cur.row_mut(r).fill(0.0);
            }
        }
        let a = policy.act_batch(cur.view())?;
        let mut next = dynamics.predict_next_batch(cur.view(), a.view())?;
        if next.dim() != (b, sd) {
            return Err(Error::Shape(format!("dynamics returned {:?}, expected ({b}, {sd})", next.dim())));
        }
        for (r, f) in failed.iter_mut().enumerate() {
            if f.is_none() && !(row_finite(&a, r) && row_finite(&next, r)) {
                *f = Some(i);
            }
            if f.is_some() {
                next.row_mut(r).fill(0.0);
            }
        }
        actions.push(a);
        states.push(next);
    }
    let ad = actions.first().map_or(0, |a| a.ncols());
    Ok((0..b)
        .map(|r| match failed[r] {
            Some(step) => Err(Error::Diverged {
                step,
                context: format!("autoregressive rollout row {r}"),
            }),
            None => {
                let mut st = Array2::zeros((horizon + 1, sd));
                let mut ac = Array2::zeros((horizon, ad));
                for (i, x) in states.iter().enumerate() {
                    st.row_mut(i).assign(&x.row(r));
                }
                for (i, x) in actions.iter().enumerate() {
                    ac.row_mut(i).assign(&x.row(r));
                }
                Ok(Trajectory { states: st, actions: ac })
            }
        })
        .collect())
}

/// Single-start form of [`autoregressive_batch`].
pub fn autoregressive_rollout(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    s0: &[f64],
    horizon: usize,
) -> Result<Trajectory> {
    let s0 = ArrayView2::from_shape((1, s0.len()), s0).map_err(|e| Error::Shape(e.to_string()))?;
    autoregressive_batch(dynamics, policy, s0, horizon)?
        .pop()
        .expect("one row")
}

/// `a_i = pi(s_i)` for every given state.
pub fn policy_relabel(policy: &dyn Policy, states: ArrayView2<f64>) -> Result<Array2<f64>> {
    let a = policy.act_batch(states)?;
    if a.nrows() != states.nrows() {
        return Err(Error::Shape(format!(
            "policy returned {} actions for {} states",
            a.nrows(),
            states.nrows()
        )));
    }
    Ok(a)
}

/// Mean over steps of `|s_{i+1} - T(s_i, a_i)|`: how far a trajectory strays
/// from the reference transition function.
pub fn dynamics_residual(reference: &dyn Dynamics, traj: &Trajectory) -> Result<f64> {
    let l = traj.len();
    if l == 0 {
        return Ok(0.0);
    }
    let pred = reference.predict_next_batch(traj.states.slice(s![..l, ..]), traj.actions.view())?;
    let total: f64 = (0..l)
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(traj.states.row(i + 1).iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / l as f64)
}

/// Trajectories produced by one generation round.
#[derive(Clone, Debug)]
pub struct Generation {
    /// Final trajectories after all correction rounds.
    pub trajectories: Vec<Trajectory>,
    /// The autoregressive seed trajectory for each entry of `trajectories`.
    pub seeds: Vec<Trajectory>,
    /// Row of the start-state batch each trajectory came from.
    pub sources: Vec<usize>,
    /// Start states dropped because a component diverged.
    pub failures: usize,
}

/// Generate policy-consistent trajectories from each start state: seed with
/// an autoregressive rollout, then `iterations` times resample the states
/// conditioned on `(s_0, actions)` and relabel the actions with the policy.
/// Row `r` of `s0` draws its sampler noise from `rngs[r]`.
pub fn dydiff_generate(
    denoiser: &Denoiser,
    sampler: &SamplerConfig,
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    s0: ArrayView2<f64>,
    iterations: usize,
    rngs: &mut [Rng],
) -> Result<Generation> {
    let layout = denoiser.layout;
    let l = layout.horizon;
    if s0.ncols() != layout.state_dim || rngs.len() != s0.nrows() {
        return Err(Error::Shape(format!(
            "{} start states of dim {} with {} streams for a denoiser of state dim {}",
            s0.nrows(),
            s0.ncols(),
            rngs.len(),
            layout.state_dim
        )));
    }
    let norm = &denoiser.normalizer;
    let mut seeds = Vec::new();
    let mut sources = Vec::new();
    let mut failures = 0;
    for (r, t) in autoregressive_batch(dynamics, policy, s0, l)?.into_iter().enumerate() {
        match t {
            Ok(t) => {
                seeds.push(t);
                sources.push(r);
            }
            Err(e) => {
                log::debug!("dropping start state {r}: {e}");
                failures += 1;
            }
        }
    }
    let mut current = seeds.clone();
    for _ in 0..iterations {
        if current.is_empty() {
            break;
        }
        let s0n = Array2::from_shape_fn((current.len(), layout.state_dim), |(r, d)| {
            (current[r].states[[0, d]] - norm.state_mean[d]) / norm.state_std[d]
        });
        let acts: Vec<Array2<f64>> = current
            .iter()
            .map(|t| {
                Array2::from_shape_fn(t.actions.dim(), |(i, d)| {
                    (t.actions[[i, d]] - norm.action_mean[d]) / norm.action_std[d]
                })
            })
            .collect();
        let mut row_rngs: Vec<Rng> = sources.iter().map(|&r| rngs[r].clone()).collect();
        let sample = sample_conditional_batch(
            denoiser,
            &layout,
            s0n.view(),
            &acts,
            &denoiser.schedule,
            sampler,
            &mut row_rngs,
        )?;
        for (&r, g) in sources.iter().zip(row_rngs) {
            rngs[r] = g;
        }
        let mut next = Vec::with_capacity(current.len());
        let mut next_sources = Vec::with_capacity(current.len());
        let mut next_seeds = Vec::with_capacity(current.len());
        for (k, t) in current.iter().enumerate() {
            if sample.failed[k].is_some() {
                failures += 1;
                continue;
            }
            let (states_n, _) = layout.split(sample.samples.row(k).as_slice().expect("row"))?;
            let mut states = Array2::zeros((l + 1, layout.state_dim));
            states.row_mut(0).assign(&t.states.row(0));
            for i in 1..=l {
                let raw = norm.denorm_state(states_n.row(i).as_slice().expect("row"));
                states.row_mut(i).assign(&ndarray::ArrayView1::from(&raw));
            }
            next.push(states);
            next_sources.push(sources[k]);
            next_seeds.push(seeds[k].clone());
        }
        let mut relabeled = Vec::with_capacity(next.len());
        let mut kept_sources = Vec::with_capacity(next.len());
        let mut kept_seeds = Vec::with_capacity(next.len());
        for ((states, src), seed) in next.into_iter().zip(next_sources).zip(next_seeds) {
            let actions = policy_relabel(policy, states.slice(s![..l, ..]))?;
            if actions.iter().all(|v| v.is_finite()) {
                relabeled.push(Trajectory { states, actions });
                kept_sources.push(src);
                kept_seeds.push(seed);
            } else {
                failures += 1;
            }
        }
        current = relabeled;
        sources = kept_sources;
        seeds = kept_seeds;
    }
    Ok(Generation {
        trajectories: current,
        seeds,
        sources,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, TrajectoryLayout};
    use crate::envs::{make_env, Normalizer};
    use crate::substrate::{Activation, Mlp};
    use ndarray::array;

    struct ConstDyn(Vec<f64>);

    impl Dynamics for ConstDyn {
        fn predict_next_batch(&self, s: ArrayView2<f64>, _: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(s.dim(), |(_, d)| self.0[d]))
        }
    }

    fn controller() -> FnPolicy<impl Fn(&[f64]) -> Vec<f64> + Sync> {
        FnPolicy(|s: &[f64]| crate::envs::PointMass::controller(s).to_vec())
    }

    fn random_denoiser(l: usize) -> Denoiser {
        let layout = TrajectoryLayout::new(l, 4, 2);
        Denoiser {
            mlp: Mlp::init(&[layout.width() + 1, 16, layout.width()], Activation::Relu, 3).unwrap(),
            layout,
            schedule: NoiseSchedule { n_steps: 6, ..Default::default() },
            normalizer: Normalizer::identity(4, 2),
        }
    }

    #[test]
    fn true_dynamics_reproduce_env_rollout() {
        let env = make_env("pointmass").unwrap();
        let s0 = [-1.0, -0.5, 0.1, 0.0];
        let t = autoregressive_rollout(&EnvDynamics(env.as_ref()), &controller(), &s0, 20).unwrap();
        let mut rng = rng::stream(0, &[]);
        let mut s = s0.to_vec();
        for i in 0..20 {
            let a = crate::envs::PointMass::controller(&s).to_vec();
            assert_eq!(t.actions.row(i).to_vec(), a);
            s = env.step(&s, &a, &mut rng).unwrap().next_state;
            assert_eq!(t.states.row(i + 1).to_vec(), s);
        }
    }

    #[test]
    fn single_step_and_constant_model() {
        let pol = FnPolicy(|s: &[f64]| vec![-s[0]]);
        let t = autoregressive_rollout(&ConstDyn(vec![7.0]), &pol, &[2.0], 1).unwrap();
        assert_eq!(t.states, array![[2.0], [7.0]]);
        assert_eq!(t.actions, array![[-2.0]]);
        let t = autoregressive_rollout(&ConstDyn(vec![7.0]), &pol, &[2.0], 5).unwrap();
        assert!(t.states.slice(s![1.., ..]).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn divergence_reports_step() {
        let pol = FnPolicy(|_: &[f64]| vec![0.0]);
        let err = autoregressive_rollout(&ConstDyn(vec![f64::NAN]), &pol, &[0.0], 4);
        assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn relabel_examples() {
        let pol = FnPolicy(|s: &[f64]| vec![-s[0]]);
        let states = array![[1.0], [2.0]];
        let a = policy_relabel(&pol, states.view()).unwrap();
        assert_eq!(a, array![[-1.0], [-2.0]]);
        assert_eq!(policy_relabel(&pol, states.view()).unwrap(), a);
    }

    #[test]
    fn zero_iterations_return_seed_rollout() {
        let den = random_denoiser(5);
        let env = make_env("pointmass").unwrap();
        let dynamics = EnvDynamics(env.as_ref());
        let s0 = array![[-1.0, -1.0, 0.0, 0.0], [0.5, -0.5, 0.2, 0.1]];
        let mut rngs = vec![rng::stream(1, &[0]), rng::stream(1, &[1])];
        let g = dydiff_generate(&den, &SamplerConfig::default(), &dynamics, &controller(), s0.view(), 0, &mut rngs).unwrap();
        for r in 0..2 {
            let t = autoregressive_rollout(&dynamics, &controller(), s0.row(r).as_slice().unwrap(), 5).unwrap();
            assert_eq!(g.trajectories[r], t);
        }
    }

    #[test]
    fn generated_trajectories_are_policy_consistent() {
        let den = random_denoiser(4);
        let env = make_env("pointmass").unwrap();
        let pol = controller();
        let s0 = array![[-1.0, -1.0, 0.0, 0.0], [0.123456789, -0.5, 0.2, 0.1]];
        for m in 1..3 {
            let mut rngs = vec![rng::stream(2, &[0]), rng::stream(2, &[1])];
            let g = dydiff_generate(&den, &SamplerConfig::default(), &EnvDynamics(env.as_ref()), &pol, s0.view(), m, &mut rngs).unwrap();
            assert_eq!(g.trajectories.len(), 2);
            for (t, &src) in g.trajectories.iter().zip(&g.sources) {
                assert_eq!(t.states.row(0), s0.row(src));
                let a = pol.act_batch(t.states.slice(s![..4, ..])).unwrap();
                assert_eq!(a, t.actions);
            }
        }
    }

    #[test]
    fn residual_vanishes_on_true_rollout() {
        let env = make_env("pointmass").unwrap();
        let d = EnvDynamics(env.as_ref());
        let t = autoregressive_rollout(&d, &controller(), &[-1.0, 0.0, 0.0, 0.0], 10).unwrap();
        assert_eq!(dynamics_residual(&d, &t).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        assert!(RolloutConfig { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(RolloutConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
    }
}
