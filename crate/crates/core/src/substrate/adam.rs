use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment state for one [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    m_w: Vec<Array2<T>>,
    v_w: Vec<Array2<T>>,
    m_b: Vec<Array1<T>>,
    v_b: Vec<Array1<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(mlp: &Mlp<T>, config: AdamConfig) -> Self {
        let zw = || mlp.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        let zb = || mlp.biases.iter().map(|b| Array1::zeros(b.dim())).collect();
        Self {
            config,
            m_w: zw(),
            v_w: zw(),
            m_b: zb(),
            v_b: zb(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments_flat(&self) -> (Vec<T>, Vec<T>) {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for k in 0..self.m_w.len() {
            m.extend(self.m_w[k].iter().copied());
            m.extend(self.m_b[k].iter().copied());
            v.extend(self.v_w[k].iter().copied());
            v.extend(self.v_b[k].iter().copied());
        }
        (m, v)
    }

    /// Apply one update. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn step(&mut self, mlp: &mut Mlp<T>, grads: &MlpGrads<T>) -> Result<()> {
        if grads.weights.len() != mlp.weights.len()
            || grads
                .weights
                .iter()
                .zip(&mlp.weights)
                .any(|(g, w)| g.dim() != w.dim())
            || grads
                .biases
                .iter()
                .zip(&mlp.biases)
                .any(|(g, b)| g.dim() != b.dim())
        {
            return Err(Error::Shape("gradient layout does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::non_finite(format!(
                "adam gradients at step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let t = self.step as i32;
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / corr1;
            let vhat = *v / corr2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        };
        for k in 0..mlp.weights.len() {
            Zip::from(&mut mlp.weights[k])
                .and(&mut self.m_w[k])
                .and(&mut self.v_w[k])
                .and(&grads.weights[k])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut mlp.biases[k])
                .and(&mut self.m_b[k])
                .and(&mut self.v_b[k])
                .and(&grads.biases[k])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Activation;

    fn net() -> Mlp<f64> {
        Mlp::init(&[3, 4, 2], Activation::Relu, 8).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let mut m = net();
        let before = m.flat_params();
        let mut opt = AdamState::new(&m, AdamConfig::default());
        let g = MlpGrads::zeros_like(&m);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.flat_params(), before);
        let (mm, vv) = opt.moments_flat();
        assert!(mm.iter().chain(&vv).all(|&x| x == 0.0));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut m = net();
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut opt = AdamState::new(&m, cfg);
        let mut g = MlpGrads::zeros_like(&m);
        g.weights[0].fill(0.37);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = m.weights[0][[0, 0]];
            opt.step(&mut m, &g).unwrap();
            last = before - m.weights[0][[0, 0]];
        }
        // m_hat -> g, v_hat -> g^2, so the step tends to lr * g / (|g| + eps).
        let limit = 1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((last - limit).abs() < 1e-9, "{last} vs {limit}");
    }

    #[test]
    fn non_finite_gradients_rejected_untouched() {
        let mut m = net();
        let before = m.clone();
        let mut opt = AdamState::new(&m, AdamConfig::default());
        let mut g = MlpGrads::zeros_like(&m);
        g.biases[1][0] = f64::NAN;
        assert!(matches!(opt.step(&mut m, &g), Err(Error::NonFinite { .. })));
        assert_eq!(m, before);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_runs_identical_results() {
        let run = || {
            let mut m = net();
            let mut opt = AdamState::new(&m, AdamConfig::default());
            let mut g = MlpGrads::zeros_like(&m);
            g.weights[1].fill(-0.2);
            g.biases[0].fill(0.05);
            for _ in 0..10 {
                opt.step(&mut m, &g).unwrap();
            }
            m.flat_params()
        };
        assert_eq!(run(), run());
    }
}
