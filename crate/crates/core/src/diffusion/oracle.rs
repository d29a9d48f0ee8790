use ndarray::{Array2, ArrayView2};

use super::denoiser::Denoise;
use crate::error::{Error, Result};

/// Exact minimizer of the denoising loss for an empirical distribution over
/// `points`: the posterior mean `sum_i w_i x_i` with
/// `w_i ∝ exp(-|x - x_i|^2 / (2 sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticDenoiser {
    points: Array2<f64>,
}

impl AnalyticDenoiser {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidArgument("analytic denoiser needs at least one point".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("analytic denoiser points"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn denoise_one(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .points
            .outer_iter()
            .map(|p| {
                let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -d2 / (2.0 * sigma * sigma)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (p, w) in self.points.outer_iter().zip(&weights) {
            for (o, v) in out.iter_mut().zip(p.iter()) {
                *o += w / z * v;
            }
        }
        out
    }
}

impl Denoise for AnalyticDenoiser {
    fn width(&self) -> usize {
        self.points.ncols()
    }

    fn denoise(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        if x.ncols() != self.width() || sigmas.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "analytic denoiser of width {} got {:?}",
                self.width(),
                x.dim()
            )));
        }
        let mut out = Array2::zeros(x.dim());
        for (r, row) in x.outer_iter().enumerate() {
            let d = self.denoise_one(row.as_slice().expect("standard layout"), sigmas[r]);
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&d));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng as _;

    #[test]
    fn symmetric_pair_maps_origin_to_origin() {
        let o = AnalyticDenoiser::new(array![[-1.0], [1.0]]).unwrap();
        for sigma in [0.01, 0.3, 1.0, 50.0] {
            assert_eq!(o.denoise_one(&[0.0], sigma), vec![0.0]);
        }
    }

    #[test]
    fn small_sigma_snaps_to_nearest() {
        let o = AnalyticDenoiser::new(array![[-1.0], [1.0]]).unwrap();
        assert!((o.denoise_one(&[0.5], 0.01)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(AnalyticDenoiser::new(Array2::zeros((0, 2))).is_err());
    }

    /// Posterior mean by quadrature: integrate x0 p(x0) N(x; x0, sigma^2)
    /// over a smoothed mixture whose components shrink to the points.
    fn quadrature_posterior_mean(points: &[f64], x: f64, sigma: f64) -> f64 {
        // Each point is a narrow Gaussian of width h; as h -> 0 this is the
        // empirical distribution. The posterior mean of the smoothed prior is
        // sum_i w_i m_i with m_i the per-component posterior mean, computed
        // here by brute-force Simpson integration.
        let h = 1e-7;
        let mut num = 0.0;
        let mut den = 0.0;
        for &p in points {
            let n = 2000;
            let (lo, hi) = (p - 8.0 * h, p + 8.0 * h);
            let step = (hi - lo) / n as f64;
            for k in 0..=n {
                let z = lo + k as f64 * step;
                let wk = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                let prior = (-(z - p).powi(2) / (2.0 * h * h)).exp();
                let lik = (-(x - z).powi(2) / (2.0 * sigma * sigma)).exp();
                num += wk * z * prior * lik;
                den += wk * prior * lik;
            }
        }
        num / den
    }

    #[test]
    fn matches_quadrature_on_random_sets() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..20 {
            let k = r.random_range(1..6);
            let pts: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
            let x = r.random_range(-3.0..3.0);
            let sigma = r.random_range(0.3..3.0);
            let o = AnalyticDenoiser::new(Array2::from_shape_vec((k, 1), pts.clone()).unwrap()).unwrap();
            let got = o.denoise_one(&[x], sigma)[0];
            let want = quadrature_posterior_mean(&pts, x, sigma);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }
}
