//! Minibatch regression loop shared by the supervised models.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::substrate::{AdamConfig, AdamState, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Fraction of rows held out for reporting.
    pub holdout: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            hidden: vec![128, 128],
            lr: 3e-4,
            holdout: 0.1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("batch_size and hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) || !(self.lr > 0.0) {
            return Err(Error::Config("holdout must lie in [0, 1) and lr be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_mse: f64,
    /// `None` when the holdout split is empty.
    pub holdout_mse: Option<f64>,
    pub steps: u64,
}

pub(crate) fn mse(mlp: &Mlp<f64>, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let pred = mlp.forward(x.view())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(y.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Fit `mlp` to `(x, y)` by mean squared error. The permutation that picks the
/// holdout rows and all minibatch shuffles come from `rng`.
pub(crate) fn fit_regression(
    mlp: &mut Mlp<f64>,
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &FitConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_hold = (cfg.holdout * n as f64).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();
    let mut opt = AdamState::new(
        mlp,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let out_dim = y.ncols() as f64;
    for _ in 0..cfg.epochs {
        train_idx.shuffle(rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let cache = mlp.forward_cached(xb.view())?;
            let scale = 2.0 / (chunk.len() as f64 * out_dim);
            let up = (cache.output() - &yb) * scale;
            let (grads, _) = mlp.backward(&cache, up.view())?;
            opt.step(mlp, &grads)?;
        }
    }
    let train_mse = mse(
        mlp,
        &x.select(Axis(0), &train_idx),
        &y.select(Axis(0), &train_idx),
    )?;
    let holdout_mse = if hold_idx.is_empty() {
        None
    } else {
        Some(mse(mlp, &x.select(Axis(0), hold_idx), &y.select(Axis(0), hold_idx))?)
    };
    if !train_mse.is_finite() {
        return Err(Error::non_finite("regression loss"));
    }
    Ok(FitReport {
        train_mse,
        holdout_mse,
        steps: opt.step_count(),
    })
}
