//! Single-step dynamics and reward models fit by supervised regression, and
//! the undiscounted predicted return used to rank synthetic trajectories.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::fit::{fit_regression, FitConfig, FitReport};
use crate::jsonio::{read_json, write_json};
use crate::rng::{self, tag};
use crate::substrate::{Activation, Mlp, MlpDoc};

/// Anything that maps a batch of `(s, a)` to next states.
pub trait Dynamics: Sync {
    fn predict_next_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>)
        -> Result<Array2<f64>>;
}

/// Anything that scores a batch of `(s, a)` with a scalar reward.
pub trait RewardFn: Sync {
    fn reward_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>>;
}

impl<F> RewardFn for F
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    fn reward_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(states
            .outer_iter()
            .zip(actions.outer_iter())
            .map(|(s, a)| self(s.as_slice().unwrap(), a.as_slice().unwrap()))
            .collect())
    }
}

fn check_finite(x: &ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what.to_string()))
    }
}

fn normalized_inputs(
    norm: &Normalizer,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if states.nrows() != actions.nrows()
        || states.ncols() != norm.state_dim()
        || actions.ncols() != norm.action_dim()
    {
        return Err(Error::Shape(format!(
            "expected (B, {}) states and (B, {}) actions, got {:?} and {:?}",
            norm.state_dim(),
            norm.action_dim(),
            states.dim(),
            actions.dim()
        )));
    }
    let mut s = states.to_owned();
    for mut row in s.outer_iter_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - norm.state_mean[d]) / norm.state_std[d];
        }
    }
    let mut a = actions.to_owned();
    for mut row in a.outer_iter_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - norm.action_mean[d]) / norm.action_std[d];
        }
    }
    concatenate(Axis(1), &[s.view(), a.view()]).map_err(|e| Error::Shape(e.to_string()))
}

/// Predicts the state delta `s' - s` in units standardized by the dataset's
/// delta statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModel {
    pub mlp: Mlp<f64>,
    pub normalizer: Normalizer,
    pub delta_mean: Vec<f64>,
    pub delta_std: Vec<f64>,
}

impl DynamicsModel {
    pub fn predict_next(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::Shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_next_batch(s, a)?.into_raw_vec_and_offset().0)
    }
}

impl Dynamics for DynamicsModel {
    fn predict_next_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        check_finite(&states, "dynamics input state")?;
        check_finite(&actions, "dynamics input action")?;
        let x = normalized_inputs(&self.normalizer, states, actions)?;
        let mut out = self.mlp.forward(x.view())?;
        for (mut row, s) in out.outer_iter_mut().zip(states.outer_iter()) {
            for (d, v) in row.iter_mut().enumerate() {
                *v = s[d] + (*v * self.delta_std[d] + self.delta_mean[d]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub mlp: Mlp<f64>,
    pub normalizer: Normalizer,
}

impl RewardFn for RewardModel {
    fn reward_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_finite(&states, "reward input state")?;
        check_finite(&actions, "reward input action")?;
        let x = normalized_inputs(&self.normalizer, states, actions)?;
        let out = self.mlp.forward(x.view())?;
        Ok(out
            .column(0)
            .iter()
            .map(|&v| self.normalizer.denorm_reward(v))
            .collect())
    }
}

fn require_transitions(dataset: &Dataset) -> Result<&Normalizer> {
    if dataset.num_transitions() == 0 {
        return Err(Error::InvalidArgument("cannot fit a model on an empty dataset".into()));
    }
    dataset.normalizer()
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Fit the dynamics model to every transition of `dataset`.
pub fn train_dynamics(
    dataset: &Dataset,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(DynamicsModel, FitReport)> {
    cfg.validate()?;
    let norm = require_transitions(dataset)?.clone();
    let tr = dataset.transitions();
    let deltas = &tr.next_states - &tr.states;
    let delta_mean: Vec<f64> = deltas.mean_axis(Axis(0)).unwrap().to_vec();
    let delta_std: Vec<f64> = deltas
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|s| s.max(1e-8))
        .collect();
    let x = normalized_inputs(&norm, tr.states.view(), tr.actions.view())?;
    let mut y = deltas;
    for mut row in y.outer_iter_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - delta_mean[d]) / delta_std[d];
        }
    }
    let sd = dataset.state_dim;
    let mut mlp = Mlp::init(
        &layer_sizes(sd + dataset.action_dim, &cfg.hidden, sd),
        Activation::Relu,
        seed ^ tag::DYNAMICS,
    )?;
    let mut rng = rng::stream(seed, &[tag::DYNAMICS]);
    let report = fit_regression(&mut mlp, &x, &y, cfg, &mut rng)?;
    Ok((
        DynamicsModel {
            mlp,
            normalizer: norm,
            delta_mean,
            delta_std,
        },
        report,
    ))
}

/// Fit the reward model to every transition of `dataset`.
pub fn train_reward(dataset: &Dataset, cfg: &FitConfig, seed: u64) -> Result<(RewardModel, FitReport)> {
    cfg.validate()?;
    let norm = require_transitions(dataset)?.clone();
    let tr = dataset.transitions();
    let x = normalized_inputs(&norm, tr.states.view(), tr.actions.view())?;
    let y = Array2::from_shape_fn((tr.len(), 1), |(i, _)| norm.norm_reward(tr.rewards[i]));
    let mut mlp = Mlp::init(
        &layer_sizes(dataset.state_dim + dataset.action_dim, &cfg.hidden, 1),
        Activation::Relu,
        seed ^ tag::REWARD,
    )?;
    let mut rng = rng::stream(seed, &[tag::REWARD]);
    let report = fit_regression(&mut mlp, &x, &y, cfg, &mut rng)?;
    Ok((RewardModel { mlp, normalizer: norm }, report))
}

/// Undiscounted predicted return of a trajectory with `L + 1` states and `L`
/// actions: the sum of `r(s_i, a_i)` for `i < L`. The final state is unused.
pub fn trajectory_return(
    reward: &dyn RewardFn,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<f64> {
    let l = actions.nrows();
    if states.nrows() != l + 1 {
        return Err(Error::Shape(format!(
            "trajectory has {} states for {} actions",
            states.nrows(),
            l
        )));
    }
    let terms = reward.reward_batch(states.slice(ndarray::s![..l, ..]), actions)?;
    Ok(terms.iter().sum())
}

#[derive(Serialize, Deserialize)]
struct WorldModelDoc {
    #[serde(flatten)]
    mlp: MlpDoc,
    kind: String,
    normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_std: Option<Vec<f64>>,
}


impl DynamicsModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &WorldModelDoc {
                mlp: self.mlp.to_doc(),
                kind: "dynamics".into(),
                normalizer: self.normalizer.clone(),
                delta_mean: Some(self.delta_mean.clone()),
                delta_std: Some(self.delta_std.clone()),
            },
            path.as_ref(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: WorldModelDoc = read_json(path.as_ref())?;
        if doc.kind != "dynamics" {
            return Err(Error::Version {
                found: doc.kind,
                expected: "dynamics".into(),
            });
        }
        let (Some(delta_mean), Some(delta_std)) = (doc.delta_mean, doc.delta_std) else {
            return Err(Error::Parse {
                record: 0,
                message: "dynamics checkpoint lacks delta statistics".into(),
            });
        };
        Ok(Self {
            mlp: Mlp::from_doc(&doc.mlp)?,
            normalizer: doc.normalizer,
            delta_mean,
            delta_std,
        })
    }
}

impl RewardModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &WorldModelDoc {
                mlp: self.mlp.to_doc(),
                kind: "reward".into(),
                normalizer: self.normalizer.clone(),
                delta_mean: None,
                delta_std: None,
            },
            path.as_ref(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: WorldModelDoc = read_json(path.as_ref())?;
        if doc.kind != "reward" {
            return Err(Error::Version {
                found: doc.kind,
                expected: "reward".into(),
            });
        }
        Ok(Self {
            mlp: Mlp::from_doc(&doc.mlp)?,
            normalizer: doc.normalizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_dataset, CollectRecipe, Episode, PointMass};
    use ndarray::array;

    fn pointmass_ds(n: usize) -> Dataset {
        collect_dataset(
            &PointMass::default(),
            &CollectRecipe::new(&[(0.8, 0.5), (0.2, 0.5)], n, 4),
        )
        .unwrap()
    }

    fn quick() -> FitConfig {
        FitConfig {
            epochs: 2,
            batch_size: 64,
            hidden: vec![16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn zero_net_predicts_mean_delta() {
        let ds = pointmass_ds(3);
        let (mut m, _) = train_dynamics(&ds, &quick(), 1).unwrap();
        m.mlp.zero_params();
        let s = [0.1, -0.2, 0.3, 0.0];
        let next = m.predict_next(&s, &[0.5, 0.5]).unwrap();
        for d in 0..4 {
            assert_eq!(next[d], s[d] + m.delta_mean[d]);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let ds = pointmass_ds(3);
        let (m, _) = train_dynamics(&ds, &quick(), 1).unwrap();
        let s = array![[0.1, -0.2, 0.3, 0.0], [-1.0, -1.0, 0.0, 0.2], [0.5, 0.5, 0.1, 0.1]];
        let a = array![[0.5, 0.5], [-1.0, 0.3], [0.0, 0.0]];
        let batch = m.predict_next_batch(s.view(), a.view()).unwrap();
        for i in 0..3 {
            let one = m
                .predict_next(s.row(i).as_slice().unwrap(), a.row(i).as_slice().unwrap())
                .unwrap();
            for d in 0..4 {
                assert!((one[d] - batch[[i, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::from_episodes("x", 4, 2, vec![], None).unwrap();
        assert!(train_dynamics(&ds, &quick(), 0).is_err());
        assert!(train_reward(&ds, &quick(), 0).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let ds = pointmass_ds(2);
        let (m, _) = train_dynamics(&ds, &quick(), 1).unwrap();
        assert!(m.predict_next(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let ds = pointmass_ds(3);
        let (a, ra) = train_dynamics(&ds, &quick(), 7).unwrap();
        let (b, rb) = train_dynamics(&ds, &quick(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = train_reward(&ds, &quick(), 7).unwrap();
        let (d, _) = train_reward(&ds, &quick(), 7).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn repeated_transition_is_memorized() {
        let ep = Episode {
            states: vec![vec![0.3, 0.1], vec![0.5, 0.4]],
            actions: vec![vec![1.0]],
            rewards: vec![2.0],
            terminal: false,
        };
        let ds = Dataset::from_episodes("rep", 2, 1, vec![ep; 50], None).unwrap();
        let cfg = FitConfig {
            epochs: 400,
            lr: 1e-3,
            ..quick()
        };
        let (m, report) = train_dynamics(&ds, &cfg, 3).unwrap();
        assert!(report.train_mse <= 1e-6);
        let next = m.predict_next(&[0.3, 0.1], &[1.0]).unwrap();
        assert!((next[0] - 0.5).abs() < 1e-6 && (next[1] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn constant_reward_is_recovered() {
        let ds = pointmass_ds(3);
        let mut ds = ds;
        for e in &mut ds.episodes {
            e.rewards.iter_mut().for_each(|r| *r = -0.75);
        }
        let ds = Dataset::from_episodes(&ds.env, 4, 2, ds.episodes, None).unwrap();
        let (m, _) = train_reward(&ds, &quick(), 2).unwrap();
        let tr = ds.transitions();
        let pred = m.reward_batch(tr.states.view(), tr.actions.view()).unwrap();
        assert!(pred.iter().all(|p| (p + 0.75).abs() < 1e-3));
    }

    #[test]
    fn return_of_constant_reward() {
        let one = |_: &[f64], _: &[f64]| 1.0;
        let states = Array2::<f64>::zeros((11, 2));
        let actions = Array2::<f64>::zeros((10, 1));
        assert_eq!(trajectory_return(&one, states.view(), actions.view()).unwrap(), 10.0);
    }

    #[test]
    fn return_with_single_step() {
        let r = |s: &[f64], a: &[f64]| 3.0 * s[0] + a[0];
        let states = array![[2.0], [100.0]];
        let actions = array![[0.5]];
        assert_eq!(trajectory_return(&r, states.view(), actions.view()).unwrap(), 6.5);
    }

    #[test]
    fn return_of_linear_reward_on_a_line() {
        // r = s[0] on states 0..9 with L = 9 sums terms i = 0..8.
        let r = |s: &[f64], _: &[f64]| s[0];
        let states = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let actions = Array2::<f64>::zeros((9, 1));
        let oracle: f64 = (0..9).map(|i| i as f64).sum();
        assert_eq!(oracle, 36.0);
        assert_eq!(trajectory_return(&r, states.view(), actions.view()).unwrap(), oracle);
    }

    #[test]
    fn return_rejects_length_mismatch() {
        let r = |_: &[f64], _: &[f64]| 0.0;
        let states = Array2::<f64>::zeros((5, 1));
        let actions = Array2::<f64>::zeros((5, 1));
        assert!(trajectory_return(&r, states.view(), actions.view()).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let ds = pointmass_ds(2);
        let (d, _) = train_dynamics(&ds, &quick(), 1).unwrap();
        let (r, _) = train_reward(&ds, &quick(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path().join("d.json")).unwrap();
        r.save(dir.path().join("r.json")).unwrap();
        assert_eq!(DynamicsModel::load(dir.path().join("d.json")).unwrap(), d);
        assert_eq!(RewardModel::load(dir.path().join("r.json")).unwrap(), r);
        assert!(DynamicsModel::load(dir.path().join("r.json")).is_err());
        let text = std::fs::read_to_string(dir.path().join("d.json")).unwrap();
        assert!(text.contains("\"kind\":\"dynamics\"") && text.contains("dydiff-mlp-v1"));
    }
}
