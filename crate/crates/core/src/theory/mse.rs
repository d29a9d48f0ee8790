use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::diffusion::{sample_conditional_batch, Denoiser, SamplerConfig};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rollout::{autoregressive_batch, EnvDynamics, Policy, Trajectory};
use crate::world_models::Dynamics;

/// Mean squared state error at one horizon, averaged over start states and
/// state dimensions. The diffusion column is absent past the window length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseRow {
    pub horizon: usize,
    pub mse_autoregressive: f64,
    pub mse_diffusion: Option<f64>,
    pub n_starts: usize,
}

fn sq_err(a: &Trajectory, b: &Trajectory, h: usize) -> f64 {
    a.states
        .row(h)
        .iter()
        .zip(b.states.row(h).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.states.ncols() as f64
}

/// Compare the dynamics model's closed-loop rollout under `policy` and the
/// denoiser's sample conditioned on the true action sequence against the real
/// environment rollout, at each horizon. Start states whose rollout or sample
/// diverges are left out of every column.
#[allow(clippy::too_many_arguments)]
pub fn rollout_mse_curve(
    env: &dyn Environment,
    dynamics: &dyn Dynamics,
    denoiser: Option<&Denoiser>,
    policy: &dyn Policy,
    horizons: &[usize],
    starts: ArrayView2<f64>,
    sampler: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<Vec<MseRow>> {
    let h_max = horizons.iter().copied().max().unwrap_or(0);
    if let Some(den) = denoiser {
        if let Some(&h) = horizons.iter().find(|&&h| h > den.layout.horizon) {
            log::warn!("horizon {h} exceeds the denoiser window {}", den.layout.horizon);
        }
        if rngs.len() != starts.nrows() {
            return Err(Error::Shape("one random stream per start state is required".into()));
        }
    }
    let l = denoiser.map_or(h_max, |d| d.layout.horizon.max(h_max));
    let truth = autoregressive_batch(&EnvDynamics(env), policy, starts, l)?;
    let model = autoregressive_batch(dynamics, policy, starts, l)?;
    let mut keep: Vec<usize> = (0..starts.nrows())
        .filter(|&r| truth[r].is_ok() && model[r].is_ok())
        .collect();
    let mut diffusion: Vec<Option<Trajectory>> = vec![None; starts.nrows()];
    if let Some(den) = denoiser {
        let lay = den.layout;
        let norm = &den.normalizer;
        let s0 = Array2::from_shape_fn((keep.len(), lay.state_dim), |(i, d)| {
            (starts[[keep[i], d]] - norm.state_mean[d]) / norm.state_std[d]
        });
        let acts: Vec<Array2<f64>> = keep
            .iter()
            .map(|&r| {
                let t = truth[r].as_ref().expect("kept rows are ok");
                Array2::from_shape_fn((lay.horizon, lay.action_dim), |(i, d)| {
                    (t.actions[[i, d]] - norm.action_mean[d]) / norm.action_std[d]
                })
            })
            .collect();
        let mut row_rngs: Vec<Rng> = keep.iter().map(|&r| rngs[r].clone()).collect();
        let sample = sample_conditional_batch(den, &lay, s0.view(), &acts, &den.schedule, sampler, &mut row_rngs)?;
        for (i, &r) in keep.iter().enumerate() {
            rngs[r] = row_rngs[i].clone();
            if sample.failed[i].is_some() {
                continue;
            }
            let (sn, an) = lay.split(sample.samples.row(i).as_slice().expect("row"))?;
            let mut states = Array2::zeros(sn.dim());
            for (j, row) in sn.outer_iter().enumerate() {
                let raw = norm.denorm_state(row.as_slice().expect("row"));
                states.row_mut(j).assign(&ndarray::ArrayView1::from(&raw));
            }
            diffusion[r] = Some(Trajectory { states, actions: an });
        }
        keep.retain(|&r| diffusion[r].is_some());
    }
    if keep.is_empty() {
        return Err(Error::non_finite("every start state diverged"));
    }
    let n = keep.len() as f64;
    Ok(horizons
        .iter()
        .map(|&h| {
            let ar = keep
                .iter()
                .map(|&r| sq_err(model[r].as_ref().unwrap(), truth[r].as_ref().unwrap(), h))
                .sum::<f64>()
                / n;
            let df = denoiser.filter(|d| h <= d.layout.horizon).map(|_| {
                keep.iter()
                    .map(|&r| sq_err(diffusion[r].as_ref().unwrap(), truth[r].as_ref().unwrap(), h))
                    .sum::<f64>()
                    / n
            });
            MseRow {
                horizon: h,
                mse_autoregressive: ar,
                mse_diffusion: df,
                n_starts: keep.len(),
            }
        })
        .collect())
}
