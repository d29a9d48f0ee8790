use serde::{Deserialize, Serialize};

use super::tabular::{
    marginal_sequence, measure_eps_m_from, per_state_model_error, perturbed_model, random_mdp,
    random_policy, state_values, tv_distance, TabularMdp, TabularPolicy,
};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};
use crate::scalar::Scalar;
use rand::Rng as _;

/// Constants of the return-gap bounds and the iterated-correction recursion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub gamma: f64,
    pub reward_bound: f64,
    pub eps_m: f64,
    pub eps_d: f64,
    pub eps_sd: f64,
    pub c_pi: f64,
    pub c_ad: f64,
    /// Rollout length.
    pub horizon: usize,
}

impl BoundParams {
    /// `C = C_{a,d} C_pi`.
    pub fn contraction(&self) -> f64 {
        self.c_ad * self.c_pi
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument("gamma must lie in (0, 1)".into()));
        }
        if [self.eps_m, self.eps_d, self.eps_sd, self.c_pi, self.c_ad, self.reward_bound]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::InvalidArgument("errors, constants and R must be non-negative".into()));
        }
        Ok(())
    }
}

/// Return gap bound for an autoregressive model: `2 R gamma eps_m / (1 - gamma)^2`.
pub fn lemma2_bound<T: Scalar>(gamma: T, r: T, eps_m: T) -> T {
    T::of(2.0) * r * gamma * eps_m / ((T::one() - gamma) * (T::one() - gamma))
}

/// Return gap bound for a model with per-step marginal error `eps_d`:
/// `2 R eps_d / (1 - gamma)`.
pub fn theorem1_bound<T: Scalar>(gamma: T, r: T, eps_d: T) -> T {
    T::of(2.0) * r * eps_d / (T::one() - gamma)
}

/// State-sequence error after `k` correction rounds:
/// `(1 - C^k)/(1 - C) eps_sd + C^k L eps_m`, with the `C = 1` limit
/// `k eps_sd + L eps_m`.
pub fn iterated_bound(p: &BoundParams, k: u32) -> f64 {
    let c = p.contraction();
    let seed_err = p.horizon as f64 * p.eps_m;
    if c == 1.0 {
        return k as f64 * p.eps_sd + seed_err;
    }
    let ck = c.powi(k as i32);
    (1.0 - ck) / (1.0 - c) * p.eps_sd + ck * seed_err
}

/// One checked inequality `lhs <= rhs`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub instance_id: usize,
    pub quantity_lhs: f64,
    pub bound_rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl BoundRow {
    fn new(instance_id: usize, lhs: f64, rhs: f64) -> Self {
        Self {
            instance_id,
            quantity_lhs: lhs,
            bound_rhs: rhs,
            slack: rhs - lhs,
            holds: lhs <= rhs + 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Step<T> {
    pub t: usize,
    pub lhs: T,
    pub rhs: T,
    pub holds: bool,
}

/// Marginal drift of the model against `t eps_m` for `t = 0..=horizon`, with
/// `eps_m` measured under the true visitation from `s0` over the same
/// horizon.
pub fn lemma1_check<T: Scalar>(
    truth: &TabularMdp<T>,
    model: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    s0: usize,
    horizon: usize,
) -> Result<Vec<Lemma1Step<T>>> {
    if s0 >= truth.n_states() {
        return Err(Error::InvalidArgument(format!("start state {s0} out of range")));
    }
    let mut start = vec![T::zero(); truth.n_states()];
    start[s0] = T::one();
    let eps = measure_eps_m_from(truth, model, pi, &start, horizon)?;
    let p = marginal_sequence(truth, pi, &start, horizon);
    let q = marginal_sequence(model, pi, &start, horizon);
    Ok((0..=horizon)
        .map(|t| {
            let lhs = tv_distance(&q[t], &p[t]);
            let rhs = T::of(t as f64) * eps;
            Lemma1Step {
                t,
                lhs,
                rhs,
                holds: lhs <= rhs + T::of(1e-10),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapCheck<T> {
    pub gap: T,
    pub bound: T,
    pub holds: bool,
}

/// `|J(T) - J(T_m)|` against the autoregressive bound. `eps_m` is the largest
/// expected one-step error over all states, which dominates the visitation
/// weighted error at every step of the infinite horizon.
pub fn lemma2_check<T: Scalar>(
    truth: &TabularMdp<T>,
    model: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    s0: usize,
) -> Result<GapCheck<T>> {
    let vt = state_values(truth, pi)?;
    let vm = state_values(model, pi)?;
    if s0 >= vt.len() || vm.len() != vt.len() {
        return Err(Error::InvalidArgument("start state or model shape".into()));
    }
    let eps = per_state_model_error(truth, model, pi)
        .into_iter()
        .fold(T::zero(), |a, b| a.max(b));
    let gap = (vt[s0] - vm[s0]).abs();
    let bound = lemma2_bound(truth.gamma, truth.reward_bound, eps);
    Ok(GapCheck {
        gap,
        bound,
        holds: gap <= bound + T::of(1e-10),
    })
}

/// A non-autoregressive model given directly by its state marginals: its own
/// distributions for `t < marginals.len()` and the true marginals afterwards.
/// Returns the gap to the true return, the theorem's bound with the measured
/// `eps_d = max_t TV`, and whether it holds.
pub fn theorem1_check<T: Scalar>(
    truth: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    s0: usize,
    marginals: &[Vec<T>],
) -> Result<GapCheck<T>> {
    let n = truth.n_states();
    if s0 >= n || marginals.iter().any(|m| m.len() != n) {
        return Err(Error::Shape("marginals must cover every state".into()));
    }
    let h = marginals.len();
    let mut start = vec![T::zero(); n];
    start[s0] = T::one();
    let p = marginal_sequence(truth, pi, &start, h);
    let r = truth.policy_reward(pi);
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    let mut eps = T::zero();
    let mut gap = T::zero();
    let mut disc = T::one();
    for t in 0..h {
        eps = eps.max(tv_distance(&marginals[t], &p[t]));
        gap += disc * (dot(&marginals[t], &r) - dot(&p[t], &r));
        disc *= truth.gamma;
    }
    // Both returns share the tail beyond `h`, so it cancels from the gap.
    let gap = gap.abs();
    let bound = theorem1_bound(truth.gamma, truth.reward_bound, eps);
    Ok(GapCheck {
        gap,
        bound,
        holds: gap <= bound + T::of(1e-10),
    })
}

/// Per-step distributions that differ from the true marginals by a random
/// mixture of weight at most `beta`.
pub fn perturbed_marginals<T: Scalar>(
    truth: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    s0: usize,
    horizon: usize,
    beta: f64,
    rng: &mut Rng,
) -> Vec<Vec<T>> {
    let n = truth.n_states();
    let mut start = vec![T::zero(); n];
    start[s0] = T::one();
    let p = marginal_sequence(truth, pi, &start, horizon);
    p.into_iter()
        .take(horizon)
        .map(|m| {
            let w = T::of(beta * rng.random::<f64>());
            let j = rng.random_range(0..n);
            m.iter()
                .enumerate()
                .map(|(s, &v)| (T::one() - w) * v + if s == j { w } else { T::zero() })
                .collect()
        })
        .collect()
}

/// Shape of the randomized instances used by the bound sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub instances: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Largest model perturbation weight.
    pub beta_max: f64,
    pub horizon: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            n_states: 10,
            n_actions: 3,
            gamma: 0.9,
            beta_max: 0.3,
            horizon: 20,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::Config("bound sweeps need states and actions".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(0.0..=1.0).contains(&self.beta_max) {
            return Err(Error::Config("sweep gamma must lie in (0, 1) and beta_max in [0, 1]".into()));
        }
        Ok(())
    }
}

fn instance(cfg: &SweepConfig, seed: u64, which: u64, i: usize) -> (Rng, TabularMdp<f64>, TabularPolicy<f64>) {
    let mut r = rng::stream(seed, &[tag::THEORY, which, i as u64]);
    let mdp = random_mdp(cfg.n_states, cfg.n_actions, cfg.gamma, &mut r);
    let pi = random_policy(cfg.n_states, cfg.n_actions, &mut r);
    (r, mdp, pi)
}

/// One row per instance holding its tightest step.
pub fn lemma1_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    (0..cfg.instances)
        .map(|i| {
            let (mut r, mdp, pi) = instance(cfg, seed, 1, i);
            let beta = cfg.beta_max * r.random::<f64>();
            let model = perturbed_model(&mdp, beta, &mut r);
            let steps = lemma1_check(&mdp, &model, &pi, 0, cfg.horizon)?;
            let tight = steps
                .iter()
                .min_by(|a, b| (a.rhs - a.lhs).total_cmp(&(b.rhs - b.lhs)))
                .expect("horizon + 1 steps");
            let mut row = BoundRow::new(i, tight.lhs, tight.rhs);
            row.holds = steps.iter().all(|s| s.holds);
            Ok(row)
        })
        .collect()
}

pub fn lemma2_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    (0..cfg.instances)
        .map(|i| {
            let (mut r, mdp, pi) = instance(cfg, seed, 2, i);
            let beta = cfg.beta_max * r.random::<f64>();
            let model = perturbed_model(&mdp, beta, &mut r);
            let c = lemma2_check(&mdp, &model, &pi, 0)?;
            Ok(BoundRow::new(i, c.gap, c.bound))
        })
        .collect()
}

pub fn theorem1_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    (0..cfg.instances)
        .map(|i| {
            let (mut r, mdp, pi) = instance(cfg, seed, 3, i);
            let marg = perturbed_marginals(&mdp, &pi, 0, cfg.horizon, cfg.beta_max, &mut r);
            let c = theorem1_check(&mdp, &pi, 0, &marg)?;
            Ok(BoundRow::new(i, c.gap, c.bound))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_plug_ins() {
        assert!((lemma2_bound(0.9f64, 1.0, 0.1) - 18.0).abs() < 1e-12);
        assert!((theorem1_bound(0.9f64, 1.0, 0.1) - 2.0).abs() < 1e-12);
    }

    fn params(c: f64) -> BoundParams {
        BoundParams {
            gamma: 0.9,
            reward_bound: 1.0,
            eps_m: 0.1,
            eps_d: 0.0,
            eps_sd: 0.01,
            c_pi: c,
            c_ad: 1.0,
            horizon: 10,
        }
    }

    #[test]
    fn iterated_bound_examples() {
        assert_eq!(iterated_bound(&params(0.5), 0), 1.0);
        assert!((iterated_bound(&params(0.5), 2) - 0.265).abs() < 1e-15);
        assert!((iterated_bound(&params(0.5), 1000) - 0.02).abs() < 1e-9);
        assert!((iterated_bound(&params(1.0), 3) - 1.03).abs() < 1e-15);
    }

    #[test]
    fn iterated_bound_moves_toward_its_limit() {
        for c in [0.1, 0.5, 0.9] {
            for eps_sd in [0.001, 0.5, 2.0] {
                let p = BoundParams { eps_sd, ..params(c) };
                let limit = eps_sd / (1.0 - c);
                let seed = p.horizon as f64 * p.eps_m;
                for k in 0..30 {
                    let d = iterated_bound(&p, k + 1) - iterated_bound(&p, k);
                    if limit < seed {
                        assert!(d <= 0.0);
                    } else {
                        assert!(d >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_model_has_zero_drift() {
        let mut r = rng::stream(0, &[]);
        let mdp = random_mdp::<f64>(5, 2, 0.9, &mut r);
        let pi = random_policy(5, 2, &mut r);
        let steps = lemma1_check(&mdp, &mdp, &pi, 0, 10).unwrap();
        assert!(steps.iter().all(|s| s.lhs == 0.0 && s.rhs == 0.0 && s.holds));
    }

    #[test]
    fn sweeps_hold() {
        let cfg = SweepConfig { instances: 20, ..Default::default() };
        for rows in [lemma1_sweep(&cfg, 1).unwrap(), lemma2_sweep(&cfg, 1).unwrap(), theorem1_sweep(&cfg, 1).unwrap()] {
            assert_eq!(rows.len(), 20);
            assert!(rows.iter().all(|r| r.holds && r.slack >= -1e-10));
        }
    }
}
