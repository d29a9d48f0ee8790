use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Noise levels for training and sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    /// Number of sampling steps `N`.
    pub n_steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            n_steps: 34,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma_min, self.sigma_max, self.sigma_data, self.rho, self.p_std];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("noise schedule constants must be positive".into()));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::Config("sigma_min must be below sigma_max".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// `t_0 > t_1 > ... > t_{N-1} > t_N = 0` with
    /// `t_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho`.
    /// A single step degenerates to `[sigma_max, 0]`.
    pub fn karras_timesteps<T: Scalar>(&self) -> Vec<T> {
        let n = self.n_steps;
        let inv_rho = T::one() / T::of(self.rho);
        let rho = T::of(self.rho);
        let hi = T::of(self.sigma_max).powf(inv_rho);
        let lo = T::of(self.sigma_min).powf(inv_rho);
        let mut t = Vec::with_capacity(n + 1);
        if n == 1 {
            t.push(T::of(self.sigma_max));
        } else {
            let denom = T::of((n - 1) as f64);
            for i in 0..n {
                let frac = T::of(i as f64) / denom;
                t.push((hi + frac * (lo - hi)).powf(rho));
            }
        }
        t.push(T::zero());
        t
    }

    /// Training noise level: `ln(sigma) ~ N(p_mean, p_std^2)`.
    pub fn sample_training_sigma(&self, rng: &mut Rng) -> f64 {
        self.sigma_from_z(rng::normal(rng))
    }

    pub fn sigma_from_z(&self, z: f64) -> f64 {
        (self.p_mean + self.p_std * z).exp()
    }
}

/// `lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn edm_loss_weight<T: Scalar>(sigma: T, sigma_data: T) -> T {
    (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data))
}

/// Stochastic sampler constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            s_churn: 60.0,
            s_noise: 1.002,
            s_tmin: 0.370,
            s_tmax: 52.212,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_tmin < self.s_tmax) || !(self.s_churn >= 0.0) || !(self.s_noise >= 0.0) {
            return Err(Error::Config(
                "sampler needs s_tmin < s_tmax and non-negative s_churn, s_noise".into(),
            ));
        }
        Ok(())
    }

    /// Churn factor `gamma_i = min(S_churn / N, sqrt(2) - 1)` for
    /// `t_i in [S_tmin, S_tmax]`, else 0.
    pub fn gamma<T: Scalar>(&self, t_i: T, n_steps: usize) -> T {
        if t_i >= T::of(self.s_tmin) && t_i <= T::of(self.s_tmax) {
            let churn = T::of(self.s_churn) / T::of(n_steps as f64);
            churn.min(T::of(2.0).sqrt() - T::one())
        } else {
            T::zero()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_match_constants() {
        let s = NoiseSchedule::default();
        let t: Vec<f64> = s.karras_timesteps();
        assert_eq!(t.len(), 35);
        assert!((t[0] - 80.0).abs() < 1e-12);
        assert!((t[33] - 0.002).abs() < 1e-15);
        assert_eq!(t[34], 0.0);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule {
            n_steps: 1,
            ..Default::default()
        };
        assert_eq!(s.karras_timesteps::<f64>(), vec![80.0, 0.0]);
    }

    #[test]
    fn f32_schedule_is_monotone() {
        let t: Vec<f32> = NoiseSchedule::default().karras_timesteps();
        assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(edm_loss_weight(0.5f64, 0.5), 8.0);
        assert_eq!(edm_loss_weight(1.0f64, 0.5), 5.0);
        let big = edm_loss_weight(1e8f64, 0.5);
        assert!((big - 4.0).abs() < 1e-9);
    }

    #[test]
    fn training_sigma_plug_in() {
        let s = NoiseSchedule::default();
        assert!((s.sigma_from_z(0.0) - (-1.2f64).exp()).abs() < 1e-15);
        assert!((s.sigma_from_z(0.0) - 0.3012).abs() < 1e-4);
        assert!((s.sigma_from_z(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_sigma_mean_monte_carlo() {
        let s = NoiseSchedule::default();
        let mut rng = rng::stream(5, &[]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.sample_training_sigma(&mut rng).ln()).sum::<f64>() / n as f64;
        assert!((mean + 1.2).abs() < 0.02, "{mean}");
    }

    #[test]
    fn churn_gamma() {
        let c = SamplerConfig::default();
        let g = c.gamma(1.0f64, 34);
        assert_eq!(g, 2f64.sqrt() - 1.0);
        assert_eq!(c.gamma(0.369f64, 34), 0.0);
        assert_eq!(c.gamma(52.3f64, 34), 0.0);
        assert_eq!(c.gamma(0.370f64, 34), g);
        assert_eq!(c.gamma(52.212f64, 34), g);
        assert_eq!(c.gamma(1.0f64, 1000), 0.06);
    }

    #[test]
    fn invalid_configs() {
        let bad = NoiseSchedule {
            sigma_min: 100.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            s_tmin: 60.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
