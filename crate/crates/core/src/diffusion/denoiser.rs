use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::schedule::{edm_loss_weight, NoiseSchedule};
use super::tensor::{TrajectoryLayout, TrajectoryTensor};
use crate::envs::{Normalizer, Window};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::jsonio::{read_json, write_json};
use crate::rng::{self, tag, Rng};
use crate::scalar::Scalar;
use crate::substrate::{Activation, AdamConfig, AdamState, Mlp, MlpDoc, MlpGrads};

/// A map from noisy trajectories to denoised estimates, `D(x; sigma)`.
pub trait Denoise: Sync {
    fn width(&self) -> usize;

    /// Denoise each row of `x` at that row's noise level.
    fn denoise(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>>;
}

/// EDM preconditioning: `D(x; s) = c_skip x + c_out F(c_in x, c_noise)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning<T: Scalar = f64> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

impl<T: Scalar> Preconditioning<T> {
    pub fn new(sigma: T, sigma_data: T) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        let root = (s2 + d2).sqrt();
        Self {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / root,
            c_in: T::one() / root,
            c_noise: sigma.ln() / T::of(4.0),
        }
    }
}

/// Trained trajectory denoiser together with what is needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    /// Raw network `F`: `width + 1` inputs (scaled trajectory, `c_noise`).
    pub mlp: Mlp<f64>,
    pub layout: TrajectoryLayout,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    /// Mean weighted loss over the last epoch.
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
    pub steps: u64,
}

impl Denoiser {
    /// Network input: noisy slots scaled by `c_in`, conditioned slots (always
    /// clean) passed through unscaled, then `c_noise`.
    fn raw_inputs(&self, x: &ArrayView2<f64>, pre: &[Preconditioning]) -> Array2<f64> {
        let w = x.ncols();
        let clean = self.layout.condition_mask();
        let mut input = Array2::zeros((x.nrows(), w + 1));
        for (r, (row, p)) in x.outer_iter().zip(pre).enumerate() {
            let mut dst = input.row_mut(r);
            for (k, &v) in row.iter().enumerate() {
                dst[k] = if clean[k] { v } else { p.c_in * v };
            }
            dst[w] = p.c_noise;
        }
        input
    }

    fn check(&self, x: &ArrayView2<f64>, sigmas: &[f64]) -> Result<Vec<Preconditioning>> {
        if x.ncols() != self.width() || sigmas.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "denoiser of width {} got {:?} with {} noise levels",
                self.width(),
                x.dim(),
                sigmas.len()
            )));
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("noise levels must be positive".into()));
        }
        let sd = self.schedule.sigma_data;
        Ok(sigmas.iter().map(|&s| Preconditioning::new(s, sd)).collect())
    }
}

impl Denoise for Denoiser {
    fn width(&self) -> usize {
        self.layout.width()
    }

    fn denoise(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let pre = self.check(&x, sigmas)?;
        let raw = self.mlp.forward(self.raw_inputs(&x, &pre).view())?;
        let mut out = raw;
        for ((mut o, xi), p) in out.outer_iter_mut().zip(x.outer_iter()).zip(&pre) {
            for (v, &xv) in o.iter_mut().zip(xi.iter()) {
                *v = p.c_skip * xv + p.c_out * *v;
            }
        }
        Ok(out)
    }
}

/// Convert windows to normalized rows plus per-slot loss masks.
fn window_rows(windows: &[Window], norm: &Normalizer) -> Result<(TrajectoryLayout, Array2<f64>, Array2<bool>)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training windows".into()))?;
    let layout = TrajectoryLayout::new(first.len(), norm.state_dim(), norm.action_dim());
    let w = layout.width();
    let mut data = Array2::zeros((windows.len(), w));
    let mut mask = Array2::from_elem((windows.len(), w), false);
    for (r, win) in windows.iter().enumerate() {
        if win.len() != layout.horizon
            || win.states.iter().any(|s| s.len() != layout.state_dim)
            || win.actions.iter().any(|a| a.len() != layout.action_dim)
        {
            return Err(Error::Shape(format!(
                "window {r} does not share the (L, S, A) of the first window"
            )));
        }
        let (t, m) = TrajectoryTensor::from_window(win, norm)?;
        data.row_mut(r).assign(&ndarray::ArrayView1::from(&t.data));
        mask.row_mut(r).assign(&ndarray::ArrayView1::from(&m));
    }
    Ok((layout, data, mask))
}

struct Batch {
    x: Array2<f64>,
    y: Array2<f64>,
    mask: Array2<bool>,
    sigmas: Vec<f64>,
}

fn noised_batch(
    data: &Array2<f64>,
    mask: &Array2<bool>,
    rows: &[usize],
    conditions: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Batch {
    let y = data.select(Axis(0), rows);
    let mask = mask.select(Axis(0), rows);
    let mut x = y.clone();
    let mut sigmas = Vec::with_capacity(rows.len());
    for mut row in x.outer_iter_mut() {
        let sigma = schedule.sample_training_sigma(rng);
        sigmas.push(sigma);
        row.iter_mut().for_each(|v| *v += sigma * rng::normal(rng));
    }
    // Conditioned slots stay clean: the sampler presents them clean at every
    // noise level.
    for &k in conditions {
        for r in 0..x.nrows() {
            x[[r, k]] = y[[r, k]];
        }
    }
    Batch { x, y, mask, sigmas }
}

/// Weighted loss `lambda(sigma) * mean_{masked} (D - y)^2`, averaged over rows,
/// and the gradient with respect to the raw network output.
fn loss_and_grad(
    den: &Denoiser,
    batch: &Batch,
    with_grad: bool,
) -> Result<(f64, Option<MlpGrads<f64>>)> {
    let pre = den.check(&batch.x.view(), &batch.sigmas)?;
    let input = den.raw_inputs(&batch.x.view(), &pre);
    let cache = den.mlp.forward_cached(input.view())?;
    let raw = cache.output();
    let b = batch.x.nrows() as f64;
    let mut up = Array2::zeros(raw.dim());
    let mut total = 0.0;
    for r in 0..raw.nrows() {
        let p = pre[r];
        let lambda = edm_loss_weight(batch.sigmas[r], den.schedule.sigma_data);
        let count = batch.mask.row(r).iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        let scale = lambda / count as f64;
        let mut row_loss = 0.0;
        for k in 0..raw.ncols() {
            if !batch.mask[[r, k]] {
                continue;
            }
            let d = p.c_skip * batch.x[[r, k]] + p.c_out * raw[[r, k]];
            let err = d - batch.y[[r, k]];
            row_loss += err * err;
            up[[r, k]] = scale * 2.0 * err * p.c_out / b;
        }
        total += scale * row_loss;
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(Error::non_finite("denoiser loss"));
    }
    if with_grad {
        let (g, _) = den.mlp.backward(&cache, up.view())?;
        Ok((loss, Some(g)))
    } else {
        Ok((loss, None))
    }
}

/// Train the denoiser on windows sharing one `(L, S, A)`. Each example is
/// noised on every slot at a log-normal level; only later-state slots that
/// are not padding enter the loss.
pub fn train_denoiser(
    windows: &[Window],
    normalizer: &Normalizer,
    schedule: &NoiseSchedule,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(Denoiser, DenoiserReport)> {
    schedule.validate()?;
    cfg.validate()?;
    let (layout, data, mask) = window_rows(windows, normalizer)?;
    let w = layout.width();
    let conditions = layout.condition_indices();
    let mut sizes = vec![w + 1];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(w);
    let mut den = Denoiser {
        mlp: Mlp::init(&sizes, Activation::Relu, seed ^ tag::DENOISER)?,
        layout,
        schedule: schedule.clone(),
        normalizer: normalizer.clone(),
    };
    let mut rng = rng::stream(seed, &[tag::DENOISER]);
    let n = data.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = (cfg.holdout * n as f64).floor() as usize;
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    let mut opt = AdamState::new(
        &den.mlp,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut last_epoch = 0.0;
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)).max(1) as f64;
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in train.chunks(cfg.batch_size) {
            let progress = opt.step_count() as f64 / total_steps;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let batch = noised_batch(&data, &mask, chunk, &conditions, schedule, &mut rng);
            let (loss, grads) = loss_and_grad(&den, &batch, true)?;
            let g = grads.expect("gradient requested");
            opt.step(&mut den.mlp, &g)?;
            sum += loss;
            batches += 1;
        }
        last_epoch = sum / batches.max(1) as f64;
    }
    let holdout_loss = if hold.is_empty() {
        None
    } else {
        let mut eval_rng = rng::stream(seed, &[tag::DENOISER, 1]);
        let batch = noised_batch(&data, &mask, hold, &conditions, schedule, &mut eval_rng);
        Some(loss_and_grad(&den, &batch, false)?.0)
    };
    Ok((
        den,
        DenoiserReport {
            train_loss: last_epoch,
            holdout_loss,
            steps: opt.step_count(),
        },
    ))
}

impl Denoiser {
    /// Weighted loss of `self` on explicit noisy rows, for comparisons
    /// against other denoisers on identical draws.
    pub fn weighted_error(
        den: &dyn Denoise,
        x: ArrayView2<f64>,
        clean: ArrayView2<f64>,
        sigmas: &[f64],
        slots: &[usize],
        sigma_data: f64,
    ) -> Result<f64> {
        let d = den.denoise(x, sigmas)?;
        let mut total = 0.0;
        for r in 0..x.nrows() {
            let lambda = edm_loss_weight(sigmas[r], sigma_data);
            let sq: f64 = slots.iter().map(|&k| (d[[r, k]] - clean[[r, k]]).powi(2)).sum();
            total += lambda * sq / slots.len() as f64;
        }
        Ok(total / x.nrows() as f64)
    }

    pub fn num_loss_slots(&self) -> usize {
        self.layout.later_state_indices().len()
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserDoc {
    #[serde(flatten)]
    mlp: MlpDoc,
    kind: String,
    #[serde(flatten)]
    layout: TrajectoryLayout,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
}

impl Denoiser {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &DenoiserDoc {
                mlp: self.mlp.to_doc(),
                kind: "denoiser".into(),
                layout: self.layout,
                schedule: self.schedule.clone(),
                normalizer: self.normalizer.clone(),
            },
            path.as_ref(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let doc: DenoiserDoc = read_json(path.as_ref())?;
        if doc.kind != "denoiser" {
            return Err(Error::Version {
                found: doc.kind,
                expected: "denoiser".into(),
            });
        }
        let mlp = Mlp::from_doc(&doc.mlp)?;
        let w = doc.layout.width();
        if mlp.input_dim() != w + 1 || mlp.output_dim() != w {
            return Err(Error::Shape("denoiser network does not match its layout".into()));
        }
        Ok(Self {
            mlp,
            layout: doc.layout,
            schedule: doc.schedule,
            normalizer: doc.normalizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{slice_windows, Dataset, Episode};

    fn toy_windows() -> (Vec<Window>, Normalizer) {
        let ep = |k: f64| Episode {
            states: (0..6).map(|t| vec![k + t as f64 * 0.1]).collect(),
            actions: (0..5).map(|_| vec![0.1]).collect(),
            rewards: vec![0.0; 5],
            terminal: false,
        };
        let ds = Dataset::from_episodes("toy", 1, 1, vec![ep(0.0), ep(1.0), ep(-1.0)], None).unwrap();
        (slice_windows(&ds, 2).unwrap(), ds.normalizer.unwrap())
    }

    fn quick() -> FitConfig {
        FitConfig {
            epochs: 3,
            batch_size: 4,
            hidden: vec![16, 16],
            lr: 1e-3,
            holdout: 0.0,
        }
    }

    #[test]
    fn preconditioning_limits() {
        let p = Preconditioning::new(1e-6f64, 0.5);
        assert!((p.c_skip - 1.0).abs() < 1e-11);
        assert!(p.c_out < 1.1e-6);
        let p = Preconditioning::new(0.5f64, 0.5);
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_noise - 0.5f64.ln() / 4.0).abs() < 1e-15);
        // lambda * c_out^2 = 1 makes the loss an unweighted regression on F.
        let l = edm_loss_weight(0.7f64, 0.5);
        let c = Preconditioning::new(0.7f64, 0.5).c_out;
        assert!((l * c * c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn denoiser_is_near_identity_at_tiny_sigma() {
        let (w, n) = toy_windows();
        let (den, _) = train_denoiser(&w, &n, &NoiseSchedule::default(), &quick(), 1).unwrap();
        let x = Array2::from_shape_fn((3, den.width()), |(r, k)| (r * 7 + k) as f64 * 0.1 - 0.4);
        let d = den.denoise(x.view(), &[1e-6; 3]).unwrap();
        for (a, b) in d.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn two_loss_slots_on_small_layout() {
        let (w, n) = toy_windows();
        let (_, _, mask) = window_rows(&w, &n).unwrap();
        assert_eq!(mask.ncols(), 5);
        for row in mask.outer_iter() {
            assert_eq!(row.iter().filter(|&&m| m).count(), 2);
            assert!(row[2] && row[4]);
        }
    }

    #[test]
    fn padded_slots_excluded_from_loss() {
        let ep = Episode {
            states: vec![vec![0.0], vec![1.0]],
            actions: vec![vec![0.5]],
            rewards: vec![0.0],
            terminal: true,
        };
        let ds = Dataset::from_episodes("toy", 1, 1, vec![ep], None).unwrap();
        let w = slice_windows(&ds, 3).unwrap();
        let (_, _, mask) = window_rows(&w, ds.normalizer.as_ref().unwrap()).unwrap();
        // only s_1 is a real later state
        assert_eq!(mask.row(0).iter().filter(|&&m| m).count(), 1);
        assert!(mask[[0, 2]]);
    }

    #[test]
    fn mixed_window_shapes_rejected() {
        let (mut w, n) = toy_windows();
        w[1].actions.push(vec![0.0]);
        assert!(train_denoiser(&w, &n, &NoiseSchedule::default(), &quick(), 1).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (w, n) = toy_windows();
        let (a, ra) = train_denoiser(&w, &n, &NoiseSchedule::default(), &quick(), 4).unwrap();
        let (b, rb) = train_denoiser(&w, &n, &NoiseSchedule::default(), &quick(), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, n) = toy_windows();
        let (a, _) = train_denoiser(&w, &n, &NoiseSchedule::default(), &quick(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("den.json");
        a.save(&p).unwrap();
        assert_eq!(Denoiser::load(&p).unwrap(), a);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"kind\":\"denoiser\"") && text.contains("\"L\":2"));
    }
}
