use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::envs::{Normalizer, Window};
use crate::error::{Error, Result};

/// Shape of an interleaved trajectory vector
/// `(s_0, a_0, s_1, a_1, ..., a_{L-1}, s_L)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLayout {
    #[serde(rename = "L")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub state_dim: usize,
    #[serde(rename = "A")]
    pub action_dim: usize,
}

impl TrajectoryLayout {
    pub fn new(horizon: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            action_dim,
        }
    }

    pub fn width(&self) -> usize {
        (self.horizon + 1) * self.state_dim + self.horizon * self.action_dim
    }

    fn stride(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn state_index(&self, i: usize, d: usize) -> usize {
        debug_assert!(i <= self.horizon && d < self.state_dim);
        i * self.stride() + d
    }

    pub fn action_index(&self, i: usize, d: usize) -> usize {
        debug_assert!(i < self.horizon && d < self.action_dim);
        i * self.stride() + self.state_dim + d
    }

    /// Slot of a flat index: `(true, i, d)` for state `i`, `(false, i, d)`
    /// for action `i`.
    pub fn locate(&self, index: usize) -> (bool, usize, usize) {
        let (i, r) = (index / self.stride(), index % self.stride());
        if r < self.state_dim {
            (true, i, r)
        } else {
            (false, i, r - self.state_dim)
        }
    }

    /// First-state and action slots, in flat order.
    pub fn condition_indices(&self) -> Vec<usize> {
        (0..self.width())
            .filter(|&k| {
                let (is_state, i, _) = self.locate(k);
                !is_state || i == 0
            })
            .collect()
    }

    /// Slots of states `s_1 .. s_L`.
    /// `mask[k]` is true when slot `k` is a conditioned slot.
    pub fn condition_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width()];
        for k in self.condition_indices() {
            m[k] = true;
        }
        m
    }

    pub fn later_state_indices(&self) -> Vec<usize> {
        (1..=self.horizon)
            .flat_map(|i| (0..self.state_dim).map(move |d| (i, d)))
            .map(|(i, d)| self.state_index(i, d))
            .collect()
    }

    pub fn flatten(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        if states.dim() != (self.horizon + 1, self.state_dim)
            || actions.dim() != (self.horizon, self.action_dim)
        {
            return Err(Error::Shape(format!(
                "layout {:?} cannot hold states {:?} and actions {:?}",
                self,
                states.dim(),
                actions.dim()
            )));
        }
        let mut out = vec![0.0; self.width()];
        for i in 0..=self.horizon {
            for d in 0..self.state_dim {
                out[self.state_index(i, d)] = states[[i, d]];
            }
            if i < self.horizon {
                for d in 0..self.action_dim {
                    out[self.action_index(i, d)] = actions[[i, d]];
                }
            }
        }
        Ok(out)
    }

    pub fn split(&self, flat: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if flat.len() != self.width() {
            return Err(Error::Shape(format!(
                "expected width {}, got {}",
                self.width(),
                flat.len()
            )));
        }
        let states = Array2::from_shape_fn((self.horizon + 1, self.state_dim), |(i, d)| {
            flat[self.state_index(i, d)]
        });
        let actions = Array2::from_shape_fn((self.horizon, self.action_dim), |(i, d)| {
            flat[self.action_index(i, d)]
        });
        Ok((states, actions))
    }
}

/// A trajectory vector in normalized units with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTensor {
    pub layout: TrajectoryLayout,
    pub data: Vec<f64>,
}

impl TrajectoryTensor {
    pub fn zeros(layout: TrajectoryLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.width()],
        }
    }

    pub fn from_flat(layout: TrajectoryLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.width() {
            return Err(Error::Shape(format!(
                "expected width {}, got {}",
                layout.width(),
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    /// Normalize a window. Padded positions are zero in normalized space.
    /// Returns the tensor and the mask of slots that enter the training loss
    /// (unpadded states after the first).
    pub fn from_window(window: &Window, norm: &Normalizer) -> Result<(Self, Vec<bool>)> {
        let layout = TrajectoryLayout::new(window.len(), norm.state_dim(), norm.action_dim());
        let mut data = vec![0.0; layout.width()];
        let mut loss = vec![false; layout.width()];
        for (i, s) in window.states.iter().enumerate() {
            if s.len() != layout.state_dim {
                return Err(Error::Shape("window state width".into()));
            }
            if window.state_padded(i) {
                continue;
            }
            for (d, v) in norm.norm_state(s).into_iter().enumerate() {
                let k = layout.state_index(i, d);
                data[k] = v;
                loss[k] = i > 0;
            }
        }
        for (i, a) in window.actions.iter().enumerate() {
            if a.len() != layout.action_dim {
                return Err(Error::Shape("window action width".into()));
            }
            if window.action_padded(i) {
                continue;
            }
            for (d, v) in norm.norm_action(a).into_iter().enumerate() {
                data[layout.action_index(i, d)] = v;
            }
        }
        Ok((Self { layout, data }, loss))
    }

    pub fn state(&self, i: usize) -> Vec<f64> {
        (0..self.layout.state_dim)
            .map(|d| self.data[self.layout.state_index(i, d)])
            .collect()
    }

    pub fn action(&self, i: usize) -> Vec<f64> {
        (0..self.layout.action_dim)
            .map(|d| self.data[self.layout.action_index(i, d)])
            .collect()
    }
}

/// Hard replacement: overwrite the first state and every action with the
/// conditions. Later state slots are left as they are.
pub fn apply_conditions(
    traj: &TrajectoryTensor,
    s0: &[f64],
    actions: ArrayView2<f64>,
) -> Result<TrajectoryTensor> {
    let lay = traj.layout;
    if s0.len() != lay.state_dim || actions.dim() != (lay.horizon, lay.action_dim) {
        return Err(Error::Shape(format!(
            "conditions s0 {} / actions {:?} do not fit layout {:?}",
            s0.len(),
            actions.dim(),
            lay
        )));
    }
    let mut out = traj.clone();
    for (d, &v) in s0.iter().enumerate() {
        out.data[lay.state_index(0, d)] = v;
    }
    for i in 0..lay.horizon {
        for d in 0..lay.action_dim {
            out.data[lay.action_index(i, d)] = actions[[i, d]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn replacement_example() {
        let lay = TrajectoryLayout::new(2, 1, 1);
        let t = TrajectoryTensor::from_flat(lay, vec![9.0; 5]).unwrap();
        let out = apply_conditions(&t, &[1.0], array![[2.0], [3.0]].view()).unwrap();
        assert_eq!(out.data, vec![1.0, 2.0, 9.0, 3.0, 9.0]);
        let twice = apply_conditions(&out, &[1.0], array![[2.0], [3.0]].view()).unwrap();
        assert_eq!(twice, out);
        let same = apply_conditions(&out, &[1.0], array![[2.0], [3.0]].view()).unwrap();
        assert_eq!(same.data, out.data);
    }

    #[test]
    fn replacement_dim_mismatch() {
        let lay = TrajectoryLayout::new(2, 1, 1);
        let t = TrajectoryTensor::zeros(lay);
        assert!(apply_conditions(&t, &[1.0, 2.0], array![[2.0], [3.0]].view()).is_err());
        assert!(apply_conditions(&t, &[1.0], array![[2.0]].view()).is_err());
    }

    #[test]
    fn loss_slots_small_layout() {
        let lay = TrajectoryLayout::new(2, 1, 1);
        assert_eq!(lay.width(), 5);
        assert_eq!(lay.later_state_indices(), vec![2, 4]);
        assert_eq!(lay.condition_indices(), vec![0, 1, 3]);
    }

    proptest! {
        #[test]
        fn index_maps_round_trip(l in 1usize..8, s in 1usize..5, a in 1usize..4) {
            let lay = TrajectoryLayout::new(l, s, a);
            let mut seen = vec![false; lay.width()];
            for i in 0..=l {
                for d in 0..s {
                    let k = lay.state_index(i, d);
                    prop_assert_eq!(lay.locate(k), (true, i, d));
                    seen[k] = true;
                }
            }
            for i in 0..l {
                for d in 0..a {
                    let k = lay.action_index(i, d);
                    prop_assert_eq!(lay.locate(k), (false, i, d));
                    seen[k] = true;
                }
            }
            prop_assert!(seen.iter().all(|&x| x));
            let flat: Vec<f64> = (0..lay.width()).map(|k| k as f64).collect();
            let (st, ac) = lay.split(&flat).unwrap();
            prop_assert_eq!(lay.flatten(st.view(), ac.view()).unwrap(), flat);
        }
    }
}
