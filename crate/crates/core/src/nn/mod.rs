//! Fully connected networks with hand-written reverse-mode gradients and Adam.
//!
//! Used for both the Gaussian actor (sigmoid head producing means and floored
//! standard deviations) and the critic (scaled tanh head).

mod adam;
mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{MlpSnapshot, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Tanh => T::one() - a * a,
            Activation::Identity => T::one(),
        }
    }
}

/// Post-processing of the last layer's activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Plain,
    /// First half of the outputs are means, second half standard deviations offset by `floor`.
    Gaussian { floor: f64 },
    /// Output multiplied by `bound`.
    Scaled { bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Widths from input to output, e.g. `[603, 1024, 512, 512, 512, 512, 512, 6]`.
    pub layer_sizes: Vec<usize>,
    /// One activation per weight layer.
    pub activations: Vec<Activation>,
    pub head: Head,
    pub seed: u64,
}

pub const SIGMA_FLOOR: f64 = 1e-6;

impl NetworkSpec {
    /// Gaussian policy over three gains: rectifier trunk, sigmoid head with six outputs.
    pub fn actor(input: usize, hidden: &[usize], seed: u64) -> Self {
        Self::trunk(input, hidden, 6, Activation::Sigmoid, Head::Gaussian { floor: SIGMA_FLOOR }, seed)
    }

    /// State-value network: rectifier trunk, one output through `bound * tanh`.
    pub fn critic(input: usize, hidden: &[usize], bound: f64, seed: u64) -> Self {
        Self::trunk(input, hidden, 1, Activation::Tanh, Head::Scaled { bound }, seed)
    }

    fn trunk(input: usize, hidden: &[usize], output: usize, last: Activation, head: Head, seed: u64) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(last);
        Self {
            layer_sizes,
            activations,
            head,
            seed,
        }
    }

    /// Reference widths: 603 inputs, a 1024-wide layer followed by five 512-wide layers.
    pub fn reference_hidden() -> Vec<usize> {
        vec![1024, 512, 512, 512, 512, 512]
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty layer list")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::config("layer_sizes", "need at least two positive widths"));
        }
        if self.activations.len() + 1 != self.layer_sizes.len() {
            return Err(Error::config(
                "activations",
                format!(
                    "expected {} activations, got {}",
                    self.layer_sizes.len() - 1,
                    self.activations.len()
                ),
            ));
        }
        if let Head::Gaussian { floor } = self.head {
            if self.output_dim() % 2 != 0 || !(floor >= 0.0) {
                return Err(Error::config("head", "gaussian head needs an even output width and floor >= 0"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Network parameters together with their Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: NetworkSpec,
    /// Layer `k` maps width `layer_sizes[k]` to `layer_sizes[k + 1]`; stored as `(out, in)`.
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
    adam: AdamState<T>,
}

/// Per-parameter gradient with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flat view in the same order as [`Mlp::param`].
    pub fn get(&self, index: usize) -> T {
        let mut k = index;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if k < w.len() {
                return w.as_slice().expect("standard layout")[k];
            }
            k -= w.len();
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("gradient index {index} out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

/// Cached intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Input of each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    /// Output of the last activation before the head transform.
    last: Array2<T>,
    /// Network output after the head transform, one row per sample.
    pub output: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` from `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let wmat = Array2::from_shape_fn((fan_out, fan_in), |_| T::lit(rng.random_range(-bound..bound)));
            let bvec = Array1::from_shape_fn(fan_out, |_| T::lit(rng.random_range(-bound..bound)));
            weights.push(wmat);
            biases.push(bvec);
        }
        let adam = AdamState::zeros(&weights, &biases);
        Ok(Self {
            spec,
            weights,
            biases,
            adam,
        })
    }

    /// Builds a network from explicit layer parameters (`weights[k]` shaped `(out, in)`).
    pub fn from_parts(spec: NetworkSpec, weights: Vec<Array2<T>>, biases: Vec<Array1<T>>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape {
                context: "layer count",
                expected: layers,
                got: weights.len().min(biases.len()),
            });
        }
        for (k, w) in spec.layer_sizes.windows(2).enumerate() {
            if weights[k].dim() != (w[1], w[0]) || biases[k].len() != w[1] {
                return Err(Error::Shape {
                    context: "layer parameters",
                    expected: w[0] * w[1] + w[1],
                    got: weights[k].len() + biases[k].len(),
                });
            }
        }
        let weights: Vec<Array2<T>> = weights.into_iter().map(|w| w.as_standard_layout().into_owned()).collect();
        let adam = AdamState::zeros(&weights, &biases);
        Ok(Self {
            spec,
            weights,
            biases,
            adam,
        })
    }

    #[inline]
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    #[inline]
    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn locate(&self, index: usize) -> (usize, Option<usize>, usize) {
        let mut k = index;
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if k < w.len() {
                return (layer, Some(k), 0);
            }
            k -= w.len();
            if k < b.len() {
                return (layer, None, k);
            }
            k -= b.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Flat parameter access: per layer, row-major weights then biases.
    pub fn param(&self, index: usize) -> T {
        match self.locate(index) {
            (layer, Some(k), _) => self.weights[layer].as_slice().expect("standard layout")[k],
            (layer, None, k) => self.biases[layer][k],
        }
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        match self.locate(index) {
            (layer, Some(k), _) => self.weights[layer].as_slice_mut().expect("standard layout")[k] = value,
            (layer, None, k) => self.biases[layer][k] = value,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = T> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.spec.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn apply_head(&self, last: &Array2<T>) -> Array2<T> {
        match self.spec.head {
            Head::Plain => last.clone(),
            Head::Gaussian { floor } => {
                let half = last.ncols() / 2;
                let mut out = last.clone();
                out.slice_mut(ndarray::s![.., half..]).mapv_inplace(|s| s + T::lit(floor));
                out
            }
            Head::Scaled { bound } => last.mapv(|a| a * T::lit(bound)),
        }
    }

    /// Batched forward pass keeping the intermediates needed by [`Mlp::backward`].
    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<ForwardPass<T>> {
        self.check_input(input.ncols())?;
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut x = input.to_owned();
        for k in 0..layers {
            let mut z = x.dot(&self.weights[k].t());
            z += &self.biases[k];
            let act = self.spec.activations[k];
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let output = self.apply_head(&x);
        Ok(ForwardPass {
            inputs,
            pre,
            last: x,
            output,
        })
    }

    /// Output for a single input vector.
    pub fn forward_one(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input.len())?;
        let mut x = Array1::from(input.to_vec());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.spec.activations[k];
            x = (w.dot(&x) + b).mapv(|v| act.apply(v));
        }
        let row = x.insert_axis(Axis(0));
        Ok(self.apply_head(&row).row(0).to_vec())
    }

    /// Reverse accumulation of `sum_rows <output_grad, output>` with respect to every parameter.
    pub fn backward(&self, pass: &ForwardPass<T>, output_grad: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        if output_grad.dim() != pass.output.dim() {
            return Err(Error::Shape {
                context: "output gradient",
                expected: pass.output.len(),
                got: output_grad.len(),
            });
        }
        let mut delta = match self.spec.head {
            Head::Plain | Head::Gaussian { .. } => output_grad.to_owned(),
            Head::Scaled { bound } => output_grad.mapv(|g| g * T::lit(bound)),
        };
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for k in (0..layers).rev() {
            let act = self.spec.activations[k];
            let out = if k + 1 == layers { &pass.last } else { &pass.inputs[k + 1] };
            ndarray::Zip::from(&mut delta)
                .and(&pass.pre[k])
                .and(out)
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            gw.push(delta.t().dot(&pass.inputs[k]));
            gb.push(delta.sum_axis(Axis(0)));
            if k > 0 {
                delta = delta.dot(&self.weights[k]);
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    /// One Adam descent step along `grads`.
    pub fn adam_step(&mut self, grads: &Gradients<T>, config: &AdamConfig) -> Result<()> {
        if grads.weights.len() != self.weights.len()
            || grads.weights.iter().zip(&self.weights).any(|(g, w)| g.dim() != w.dim())
            || grads.biases.iter().zip(&self.biases).any(|(g, b)| g.dim() != b.dim())
        {
            return Err(Error::Shape {
                context: "adam gradient",
                expected: self.param_count(),
                got: grads.weights.iter().map(Array2::len).sum::<usize>() + grads.biases.iter().map(Array1::len).sum::<usize>(),
            });
        }
        self.adam.step(&mut self.weights, &mut self.biases, grads, config);
        Ok(())
    }

    /// Adds `delta` to the output-layer biases with indices in `range`.
    pub fn shift_output_bias(&mut self, range: std::ops::Range<usize>, delta: T) {
        let last = self.biases.last_mut().expect("at least one layer");
        for k in range {
            last[k] += delta;
        }
    }

    /// Copies parameters from `other` (same spec) while keeping this network's Adam state.
    pub fn copy_params_from(&mut self, other: &Mlp<T>) {
        debug_assert_eq!(self.spec.layer_sizes, other.spec.layer_sizes);
        self.weights.clone_from(&other.weights);
        self.biases.clone_from(&other.biases);
    }
}
