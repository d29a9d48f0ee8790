use ndarray::{Array2, ArrayView2};

use super::denoiser::Denoise;
use super::schedule::{NoiseSchedule, SamplerConfig};
use super::tensor::{TrajectoryLayout, TrajectoryTensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Slots pinned during sampling and, per row, the values they are pinned to.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub indices: Vec<usize>,
    /// `(rows, indices.len())`.
    pub values: Array2<f64>,
}

impl Conditioning {
    pub fn none(rows: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Array2::zeros((rows, 0)),
        }
    }

    /// First state and all actions from per-row conditions (normalized).
    pub fn first_state_and_actions(
        layout: &TrajectoryLayout,
        s0: ArrayView2<f64>,
        actions: &[Array2<f64>],
    ) -> Result<Self> {
        let rows = s0.nrows();
        if actions.len() != rows
            || s0.ncols() != layout.state_dim
            || actions
                .iter()
                .any(|a| a.dim() != (layout.horizon, layout.action_dim))
        {
            return Err(Error::Shape(format!(
                "conditions do not fit layout {layout:?}"
            )));
        }
        let indices = layout.condition_indices();
        let mut values = Array2::zeros((rows, indices.len()));
        for r in 0..rows {
            for (c, &k) in indices.iter().enumerate() {
                let (is_state, i, d) = layout.locate(k);
                values[[r, c]] = if is_state { s0[[r, d]] } else { actions[r][[i, d]] };
            }
        }
        Ok(Self { indices, values })
    }

    fn apply(&self, x: &mut Array2<f64>) {
        for (mut row, vals) in x.outer_iter_mut().zip(self.values.outer_iter()) {
            for (&k, &v) in self.indices.iter().zip(vals.iter()) {
                row[k] = v;
            }
        }
    }
}

/// Result of sampling a batch. `failed[r]` holds the solver step at which
/// row `r` first became non-finite; such rows are zeroed.
#[derive(Clone, Debug)]
pub struct BatchSample {
    pub samples: Array2<f64>,
    pub failed: Vec<Option<usize>>,
}

fn mark_failures(x: &mut Array2<f64>, failed: &mut [Option<usize>], step: usize) {
    for (mut row, f) in x.outer_iter_mut().zip(failed.iter_mut()) {
        if f.is_none() && row.iter().any(|v| !v.is_finite()) {
            *f = Some(step);
        }
        if f.is_some() {
            row.fill(0.0);
        }
    }
}

/// Stochastic second-order sampler with hard replacement of conditioned
/// slots. Row `r` draws all of its noise from `rngs[r]`, so each row's result
/// is independent of how rows are batched.
pub fn sample_batch(
    den: &dyn Denoise,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    rngs: &mut [Rng],
) -> Result<BatchSample> {
    schedule.validate()?;
    cfg.validate()?;
    let rows = rngs.len();
    let width = den.width();
    if cond.values.nrows() != rows || cond.indices.iter().any(|&k| k >= width) {
        return Err(Error::Shape("conditioning does not match the batch".into()));
    }
    let t: Vec<f64> = schedule.karras_timesteps();
    let n = schedule.n_steps;
    let mut x = Array2::zeros((rows, width));
    for (mut row, r) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = t[0] * rng::normal(r));
    }
    let mut failed = vec![None; rows];
    for i in 0..n {
        let (t_cur, t_next) = (t[i], t[i + 1]);
        let gamma = cfg.gamma(t_cur, n);
        let t_hat = t_cur + gamma * t_cur;
        let mut x_hat = x.clone();
        if gamma > 0.0 {
            let scale = (t_hat * t_hat - t_cur * t_cur).sqrt();
            for (mut row, r) in x_hat.outer_iter_mut().zip(rngs.iter_mut()) {
                row.iter_mut()
                    .for_each(|v| *v += scale * cfg.s_noise * rng::normal(r));
            }
        }
        let sig_hat = vec![t_hat; rows];
        let denoised = den.denoise(x_hat.view(), &sig_hat)?;
        let d = (&x_hat - &denoised) / t_hat;
        let mut x_next = &x_hat + &(&d * (t_next - t_hat));
        cond.apply(&mut x_next);
        if t_next != 0.0 {
            let sig_next = vec![t_next; rows];
            let denoised2 = den.denoise(x_next.view(), &sig_next)?;
            let d2 = (&x_next - &denoised2) / t_next;
            x_next = &x_hat + &((&d + &d2) * (0.5 * (t_next - t_hat)));
            cond.apply(&mut x_next);
        }
        mark_failures(&mut x_next, &mut failed, i);
        x = x_next;
    }
    Ok(BatchSample { samples: x, failed })
}

/// Sample one trajectory from `p(tau | s_0, tau_a)`. Conditions and result
/// are in normalized units; the result carries the conditions bit-exactly.
pub fn sample_conditional(
    den: &dyn Denoise,
    layout: &TrajectoryLayout,
    s0: &[f64],
    actions: &Array2<f64>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<TrajectoryTensor> {
    let s0 = ArrayView2::from_shape((1, s0.len()), s0).map_err(|e| Error::Shape(e.to_string()))?;
    let out = sample_conditional_batch(
        den,
        layout,
        s0,
        std::slice::from_ref(actions),
        schedule,
        cfg,
        std::slice::from_mut(rng),
    )?;
    if let Some(step) = out.failed[0] {
        return Err(Error::Diverged {
            step,
            context: "conditional sample".into(),
        });
    }
    TrajectoryTensor::from_flat(*layout, out.samples.row(0).to_vec())
}

/// Batched form of [`sample_conditional`].
pub fn sample_conditional_batch(
    den: &dyn Denoise,
    layout: &TrajectoryLayout,
    s0: ArrayView2<f64>,
    actions: &[Array2<f64>],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rngs: &mut [Rng],
) -> Result<BatchSample> {
    if den.width() != layout.width() {
        return Err(Error::Shape(format!(
            "denoiser width {} does not match layout width {}",
            den.width(),
            layout.width()
        )));
    }
    let cond = Conditioning::first_state_and_actions(layout, s0, actions)?;
    sample_batch(den, schedule, cfg, &cond, rngs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::AnalyticDenoiser;
    use ndarray::array;

    struct Exploding;

    impl Denoise for Exploding {
        fn width(&self) -> usize {
            5
        }
        fn denoise(&self, x: ArrayView2<f64>, _: &[f64]) -> Result<Array2<f64>> {
            Ok(x.mapv(|_| f64::INFINITY))
        }
    }

    #[test]
    fn conditions_survive_bit_exactly() {
        let lay = TrajectoryLayout::new(2, 1, 1);
        let oracle = AnalyticDenoiser::new(array![[0.0, 0.1, 0.2, 0.3, 0.4], [1.0, 0.9, 0.8, 0.7, 0.6]]).unwrap();
        let s0 = [0.123456789];
        let acts = array![[-0.3], [0.7]];
        let mut r = rng::stream(1, &[]);
        let out = sample_conditional(&oracle, &lay, &s0, &acts, &NoiseSchedule::default(), &SamplerConfig::default(), &mut r).unwrap();
        assert_eq!(out.data[0].to_bits(), s0[0].to_bits());
        assert_eq!(out.action(0), vec![-0.3]);
        assert_eq!(out.action(1), vec![0.7]);
    }

    #[test]
    fn divergence_reports_step() {
        let lay = TrajectoryLayout::new(2, 1, 1);
        let mut r = rng::stream(1, &[]);
        let err = sample_conditional(&Exploding, &lay, &[0.0], &array![[0.0], [0.0]], &NoiseSchedule::default(), &SamplerConfig::default(), &mut r);
        assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn rows_do_not_depend_on_batching() {
        let oracle = AnalyticDenoiser::new(array![[0.0, 0.1, 0.2], [1.0, 0.9, 0.8], [-1.0, 0.0, 1.0]]).unwrap();
        let sched = NoiseSchedule { n_steps: 10, ..Default::default() };
        let cfg = SamplerConfig::default();
        let mut rngs: Vec<Rng> = (0..3).map(|k| rng::stream(9, &[k])).collect();
        let all = sample_batch(&oracle, &sched, &cfg, &Conditioning::none(3), &mut rngs).unwrap();
        let mut one = vec![rng::stream(9, &[2])];
        let single = sample_batch(&oracle, &sched, &cfg, &Conditioning::none(1), &mut one).unwrap();
        assert_eq!(all.samples.row(2), single.samples.row(0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let lay = TrajectoryLayout::new(3, 1, 1);
        let oracle = AnalyticDenoiser::new(array![[0.0, 0.1, 0.2, 0.3, 0.4]]).unwrap();
        let mut r = rng::stream(1, &[]);
        assert!(sample_conditional(&oracle, &lay, &[0.0], &array![[0.0], [0.0], [0.0]], &NoiseSchedule::default(), &SamplerConfig::default(), &mut r).is_err());
    }

    #[test]
    fn oracle_driven_samples_land_on_data() {
        let pts = array![[0.0, 0.5, -0.5], [1.0, -1.0, 0.2], [-0.8, 0.3, 0.9]];
        let oracle = AnalyticDenoiser::new(pts.clone()).unwrap();
        let mut rngs: Vec<Rng> = (0..1000).map(|k| rng::stream(17, &[k])).collect();
        let out = sample_batch(&oracle, &NoiseSchedule::default(), &SamplerConfig::default(), &Conditioning::none(1000), &mut rngs).unwrap();
        let near = out
            .samples
            .outer_iter()
            .filter(|x| {
                pts.outer_iter().any(|p| {
                    p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < 0.1
                })
            })
            .count();
        assert!(near >= 990, "{near}");
    }
}
