use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const MLP_FORMAT: &str = "dydiff-mlp-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Fully connected network. Layer `k` maps `layer_sizes[k]` to
/// `layer_sizes[k + 1]` with weight shape `(out, in)`.
///
/// Hidden layers use `activation`; the output layer is affine unless
/// `output_tanh` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar> {
    layer_sizes: Vec<usize>,
    activation: Activation,
    output_tanh: bool,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T: Scalar> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Layer outputs recorded by [`Mlp::forward_cached`]. `acts[0]` is the input
/// batch and `acts[k + 1]` the output of layer `k`.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    acts: Vec<Array2<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.acts.last().expect("cache holds at least the input")
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights with bound `sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. Weights are drawn in f64 from a seeded stream and then
    /// converted, so an f32 and an f64 net from the same seed agree up to
    /// rounding.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an mlp needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let mut rng = rng::stream(seed, &[]);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                T::of(rng.random_range(-bound..bound))
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            output_tanh: false,
            weights,
            biases,
        })
    }

    /// Squash the output layer with tanh.
    pub fn with_output_tanh(mut self, on: bool) -> Self {
        self.output_tanh = on;
        self
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_tanh(&self) -> bool {
        self.output_tanh
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, inputs: &ArrayView2<T>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp expects input width {}, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    fn layer(&self, k: usize, x: &ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weights[k].t());
        z += &self.biases[k];
        let last = k + 1 == self.weights.len();
        if !last {
            let act = self.activation;
            z.mapv_inplace(|v| act.apply(v));
        } else if self.output_tanh {
            z.mapv_inplace(|v| v.tanh());
        }
        z
    }

    /// Batched forward pass: `(B, d_in) -> (B, d_out)`.
    pub fn forward(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&inputs)?;
        let mut x = self.layer(0, &inputs);
        for k in 1..self.weights.len() {
            x = self.layer(k, &x.view());
        }
        Ok(x)
    }

    /// Single-row convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, input: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<T>) -> Result<ForwardCache<T>> {
        self.check_input(&inputs)?;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(inputs.to_owned());
        for k in 0..self.weights.len() {
            let next = self.layer(k, &acts[k].view());
            acts.push(next);
        }
        Ok(ForwardCache { acts })
    }

    /// Reverse pass through a recorded forward pass. Returns parameter
    /// gradients and the gradient with respect to the inputs for the scalar
    /// loss `sum(upstream * output)`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        upstream: ArrayView2<T>,
    ) -> Result<(MlpGrads<T>, Array2<T>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let n = self.weights.len();
        let mut delta = upstream.to_owned();
        if self.output_tanh {
            Zip::from(&mut delta)
                .and(out)
                .for_each(|d, &y| *d *= Activation::Tanh.slope(y));
        }
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let input = &cache.acts[k];
            gw.push(delta.t().dot(input));
            gb.push(delta.sum_axis(Axis(0)));
            let mut back = delta.dot(&self.weights[k]);
            if k > 0 {
                let act = self.activation;
                Zip::from(&mut back)
                    .and(input)
                    .for_each(|d, &y| *d *= act.slope(y));
            }
            delta = back;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            MlpGrads {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// Forward and backward in one call.
    pub fn grad(
        &self,
        inputs: ArrayView2<T>,
        upstream: ArrayView2<T>,
    ) -> Result<(MlpGrads<T>, Array2<T>)> {
        let cache = self.forward_cached(inputs)?;
        self.backward(&cache, upstream)
    }

    /// `self <- rho * self + (1 - rho) * online`.
    pub fn polyak_from(&mut self, online: &Mlp<T>, rho: T) {
        let keep = rho;
        let take = T::one() - rho;
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            Zip::from(t).and(o).for_each(|t, &o| *t = keep * *t + take * o);
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            Zip::from(t).and(o).for_each(|t, &o| *t = keep * *t + take * o);
        }
    }

    pub fn zero_params(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(T::zero()));
        self.biases.iter_mut().for_each(|b| b.fill(T::zero()));
    }

    /// Parameters concatenated layer by layer (weights row-major, then bias).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn to_doc(&self) -> MlpDoc {
        MlpDoc {
            format: MLP_FORMAT.to_string(),
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            output_tanh: self.output_tanh,
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|v| v.as_f64()).collect())
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    pub fn from_doc(doc: &MlpDoc) -> Result<Self> {
        if doc.format != MLP_FORMAT {
            return Err(Error::Version {
                found: doc.format.clone(),
                expected: MLP_FORMAT.to_string(),
            });
        }
        let mut mlp = Self::init(&doc.layer_sizes, doc.activation, 0)?;
        mlp.output_tanh = doc.output_tanh;
        let n = mlp.weights.len();
        if doc.weights.len() != n || doc.biases.len() != n {
            return Err(Error::Shape(format!(
                "checkpoint carries {} weight and {} bias arrays for {} layers",
                doc.weights.len(),
                doc.biases.len(),
                n
            )));
        }
        for k in 0..n {
            if doc.weights[k].len() != mlp.weights[k].len()
                || doc.biases[k].len() != mlp.biases[k].len()
            {
                return Err(Error::Shape(format!("layer {k} parameter count mismatch")));
            }
            mlp.weights[k]
                .iter_mut()
                .zip(&doc.weights[k])
                .for_each(|(d, &s)| *d = T::of(s));
            mlp.biases[k]
                .iter_mut()
                .zip(&doc.biases[k])
                .for_each(|(d, &s)| *d = T::of(s));
        }
        Ok(mlp)
    }
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Versioned JSON form of an [`Mlp`]; each layer's weights are stored
/// row-major as one flat array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDoc {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub output_tanh: bool,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}
