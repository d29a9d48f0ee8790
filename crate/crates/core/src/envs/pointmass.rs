use rand::Rng as _;

use super::{EnvSpec, Environment, Step};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DT: f64 = 0.05;
pub const V_MAX: f64 = 1.0;
pub const POS_BOUND: f64 = 2.0;
pub const GOAL: [f64; 2] = [1.0, 1.0];
pub const GOAL_RADIUS: f64 = 0.05;
pub const HORIZON: usize = 200;

/// Controller gains of the behavior policy.
pub const KP: f64 = 1.0;
pub const KD: f64 = 1.5;

/// Initial-state distribution of the point mass (velocity always zero).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitDist {
    Fixed([f64; 2]),
    /// Position uniform on `[lo, hi]^2`.
    UniformBox { lo: f64, hi: f64 },
}

/// Planar double integrator with state `(x, y, vx, vy)` and acceleration
/// actions in `[-1, 1]^2`, rewarded by negative distance to the goal.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    init: InitDist,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new(InitDist::UniformBox { lo: -2.0, hi: 0.0 })
    }
}

impl PointMass {
    pub fn new(init: InitDist) -> Self {
        let name = match init {
            InitDist::Fixed(_) => "pointmass-fixed",
            InitDist::UniformBox { .. } => "pointmass",
        };
        let corner = (2.0 * POS_BOUND).hypot(2.0 * POS_BOUND);
        Self {
            spec: EnvSpec {
                name: name.to_string(),
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: HORIZON,
                reward_bound: corner,
            },
            init,
        }
    }

    pub fn with_fixed_start(pos: [f64; 2]) -> Self {
        Self::new(InitDist::Fixed(pos))
    }

    /// Deterministic transition; actions outside the box are clipped.
    pub fn transition(state: &[f64], action: &[f64]) -> Result<Step> {
        if state.len() != 4 || action.len() != 2 {
            return Err(Error::Shape(format!(
                "point mass expects state 4 / action 2, got {} / {}",
                state.len(),
                action.len()
            )));
        }
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("point mass state/action"));
        }
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let vx = (state[2] + ax * DT).clamp(-V_MAX, V_MAX);
        let vy = (state[3] + ay * DT).clamp(-V_MAX, V_MAX);
        let x = (state[0] + vx * DT).clamp(-POS_BOUND, POS_BOUND);
        let y = (state[1] + vy * DT).clamp(-POS_BOUND, POS_BOUND);
        let dist = (x - GOAL[0]).hypot(y - GOAL[1]);
        Ok(Step {
            next_state: vec![x, y, vx, vy],
            reward: -dist,
            done: dist < GOAL_RADIUS,
        })
    }

    /// Noise-free PD controller toward the goal, clipped to the action box.
    pub fn controller(state: &[f64]) -> [f64; 2] {
        let ax = KP * (GOAL[0] - state[0]) - KD * state[2];
        let ay = KP * (GOAL[1] - state[1]) - KD * state[3];
        [ax.clamp(-1.0, 1.0), ay.clamp(-1.0, 1.0)]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        match self.init {
            InitDist::Fixed([x, y]) => vec![x, y, 0.0, 0.0],
            InitDist::UniformBox { lo, hi } => {
                vec![rng.random_range(lo..hi), rng.random_range(lo..hi), 0.0, 0.0]
            }
        }
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Result<Step> {
        Self::transition(state, action)
    }

    fn behavior_action(&self, state: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
        let mut a = [0.0; 2];
        for (k, slot) in a.iter_mut().enumerate() {
            // Noise is not drawn at level zero so that run is seed-independent.
            let eps = if noise > 0.0 { noise * rng::normal(rng) } else { 0.0 };
            *slot = (KP * (GOAL[k] - state[k]) - KD * state[k + 2] + eps).clamp(-1.0, 1.0);
        }
        a.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_from_rest() {
        let s = PointMass::transition(&[0.0, 0.0, 0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((s.next_state[2] - 0.05).abs() < 1e-15);
        assert_eq!(s.next_state[3], 0.0);
        assert!((s.next_state[0] - 0.0025).abs() < 1e-15);
        assert_eq!(s.next_state[1], 0.0);
    }

    #[test]
    fn idle_keeps_position() {
        let s = PointMass::transition(&[-0.5, 0.3, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&s.next_state[..2], &[-0.5, 0.3]);
        assert_eq!(s.reward, -(1.5f64).hypot(0.7));
        assert!(!s.done);
    }

    #[test]
    fn at_goal_is_terminal() {
        let s = PointMass::transition(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(s.done);
        assert!(s.reward.abs() < 1e-12);
    }

    #[test]
    fn actions_and_bounds_clip() {
        let s = PointMass::transition(&[1.99, 0.0, 1.0, 0.0], &[5.0, 0.0]).unwrap();
        assert_eq!(s.next_state[2], 1.0);
        assert_eq!(s.next_state[0], 2.0);
    }

    #[test]
    fn non_finite_state_rejected() {
        assert!(PointMass::transition(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn rewards_within_declared_bound() {
        let env = PointMass::default();
        let s = PointMass::transition(&[-2.0, -2.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(s.reward.abs() <= env.spec().reward_bound);
    }
}
