use std::collections::VecDeque;

use ndarray::{s, Array2};
use rand::Rng as _;

use super::Trajectory;
use crate::envs::Transitions;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::world_models::RewardFn;

/// One synthetic transition. Synthetic data never terminates.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// FIFO ring of synthetic transitions.
#[derive(Clone, Debug)]
pub struct SyntheticBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl SyntheticBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::new(),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions inserted over the buffer's lifetime, evicted ones included.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Insert every step of `traj` with rewards scored by `reward`.
pub fn buffer_insert(buf: &mut SyntheticBuffer, traj: &Trajectory, reward: &dyn RewardFn) -> Result<usize> {
    let l = traj.len();
    if traj.states.nrows() != l + 1 {
        return Err(Error::Shape(format!(
            "trajectory has {} states for {l} actions",
            traj.states.nrows()
        )));
    }
    let r = reward.reward_batch(traj.states.slice(s![..l, ..]), traj.actions.view())?;
    for (i, &ri) in r.iter().enumerate() {
        buf.push(Transition {
            state: traj.states.row(i).to_vec(),
            action: traj.actions.row(i).to_vec(),
            reward: ri,
            next_state: traj.states.row(i + 1).to_vec(),
        });
    }
    Ok(l)
}

/// A training batch; the first `n_real` rows come from the real dataset.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
    pub n_real: usize,
}

/// Draw `ceil(alpha * size)` real transitions and the rest from the synthetic
/// buffer, uniformly with replacement. An empty buffer yields an all-real
/// batch.
pub fn sample_mixed(
    real: &Transitions,
    syn: &SyntheticBuffer,
    alpha: f64,
    size: usize,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    if size == 0 || real.is_empty() {
        return Err(Error::InvalidArgument("mixed batch needs size >= 1 and real data".into()));
    }
    let n_real = if syn.is_empty() {
        size
    } else {
        ((alpha * size as f64).ceil() as usize).min(size)
    };
    let (sd, ad) = (real.states.ncols(), real.actions.ncols());
    let mut b = MixedBatch {
        states: Array2::zeros((size, sd)),
        actions: Array2::zeros((size, ad)),
        rewards: Vec::with_capacity(size),
        next_states: Array2::zeros((size, sd)),
        dones: Vec::with_capacity(size),
        n_real,
    };
    for row in 0..n_real {
        let i = rng.random_range(0..real.len());
        b.states.row_mut(row).assign(&real.states.row(i));
        b.actions.row_mut(row).assign(&real.actions.row(i));
        b.next_states.row_mut(row).assign(&real.next_states.row(i));
        b.rewards.push(real.rewards[i]);
        b.dones.push(real.dones[i]);
    }
    for row in n_real..size {
        let t = syn.get(rng.random_range(0..syn.len())).expect("index in range");
        if t.state.len() != sd || t.action.len() != ad {
            return Err(Error::Shape("synthetic transition dims differ from real data".into()));
        }
        b.states.row_mut(row).assign(&ndarray::ArrayView1::from(&t.state));
        b.actions.row_mut(row).assign(&ndarray::ArrayView1::from(&t.action));
        b.next_states.row_mut(row).assign(&ndarray::ArrayView1::from(&t.next_state));
        b.rewards.push(t.reward);
        b.dones.push(false);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn line(l: usize) -> Trajectory {
        Trajectory {
            states: Array2::from_shape_fn((l + 1, 1), |(i, _)| i as f64),
            actions: Array2::from_shape_fn((l, 1), |(i, _)| -(i as f64)),
        }
    }

    fn real(n: usize) -> Transitions {
        Transitions {
            states: Array2::from_elem((n, 1), 100.0),
            actions: Array2::zeros((n, 1)),
            rewards: vec![1.0; n],
            next_states: Array2::zeros((n, 1)),
            dones: vec![false; n],
        }
    }

    fn reward(s: &[f64], a: &[f64]) -> f64 {
        s[0] + a[0]
    }

    #[test]
    fn insert_counts_and_chains() {
        let mut b = SyntheticBuffer::new(100);
        assert_eq!(buffer_insert(&mut b, &line(10), &reward).unwrap(), 10);
        assert_eq!(b.len(), 10);
        for i in 0..9 {
            assert_eq!(b.get(i).unwrap().next_state, b.get(i + 1).unwrap().state);
        }
        assert_eq!(b.get(3).unwrap().reward, 0.0);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = SyntheticBuffer::new(5);
        buffer_insert(&mut b, &line(10), &reward).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.inserted(), 10);
        let firsts: Vec<f64> = b.iter().map(|t| t.state[0]).collect();
        assert_eq!(firsts, vec![5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn mixing_counts() {
        let mut b = SyntheticBuffer::new(50);
        buffer_insert(&mut b, &line(10), &reward).unwrap();
        let mut r = rng::stream(0, &[]);
        let m = sample_mixed(&real(20), &b, 0.6, 10, &mut r).unwrap();
        assert_eq!(m.n_real, 6);
        assert_eq!(m.states.column(0).iter().filter(|&&v| v == 100.0).count(), 6);
        assert!(m.dones[6..].iter().all(|d| !d));
        let m = sample_mixed(&real(20), &b, 1.0, 10, &mut r).unwrap();
        assert_eq!(m.n_real, 10);
        let m = sample_mixed(&real(20), &SyntheticBuffer::new(5), 0.6, 10, &mut r).unwrap();
        assert_eq!(m.n_real, 10);
    }
}
