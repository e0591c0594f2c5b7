//! Victim classifier: an MLP whose parameters live in one flat vector, so any
//! point in weight space can be evaluated without a mutable model object.
//!
//! Parameter layout, layer by layer: the `in×out` weight matrix row-major
//! (applied as `x·W`), then the `out` biases.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::image::ImageBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has {actual} entries, model needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("batch images are {actual:?}, model expects {expected:?}")]
    InputDims {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// `(C, H, W)`
    pub input_dims: (usize, usize, usize),
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

/// `1×8×8 → 32 → 4`, ReLU.
impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::new((1, 8, 8), vec![32], 4)
    }
}

impl ModelSpec {
    pub fn new(input_dims: (usize, usize, usize), hidden_sizes: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec { input_dims, hidden_sizes, num_classes, activation: Activation::Relu }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_dims;
        c * h * w
    }

    /// `[input, hidden..., classes]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_sizes.len() + 2);
        sizes.push(self.input_len());
        sizes.extend_from_slice(&self.hidden_sizes);
        sizes.push(self.num_classes);
        sizes
    }

    /// `|w| = Σ (in + 1)·out`
    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_len() == 0 {
            return Err(ModelError::InvalidSpec("input dims must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec("need at least two classes".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(ModelError::InvalidSpec("hidden layer of width 0".into()));
        }
        Ok(())
    }

    fn check_params(&self, w: &[f64]) -> Result<(), ModelError> {
        let expected = self.param_count();
        if w.len() != expected {
            return Err(ModelError::ParamCount { expected, actual: w.len() });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<(), ModelError> {
        if batch.dims() != self.input_dims {
            return Err(ModelError::InputDims { expected: self.input_dims, actual: batch.dims() });
        }
        Ok(())
    }
}

/// Flat vector of every model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self − other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `(self + other) / 2`
    pub fn midpoint(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for pair in spec.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}

/// Records the forward pass `x ↦ logits` for a flat parameter var `w` and an
/// input var `x` of shape `[B, C·H·W]`.
pub fn logits_on_tape(tape: &mut Tape, spec: &ModelSpec, w: Var, x: Var) -> Result<Var, ModelError> {
    spec.check_params(tape.value(w).data())?;
    let sizes = spec.layer_sizes();
    let layers = sizes.len() - 1;
    let mut h = x;
    let mut offset = 0;
    for (l, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weights = tape.slice(w, offset, fan_in * fan_out)?;
        let weights = tape.reshape(weights, vec![fan_in, fan_out])?;
        offset += fan_in * fan_out;
        let bias = tape.slice(w, offset, fan_out)?;
        offset += fan_out;
        let z = tape.matmul(h, weights)?;
        h = tape.add_bias(z, bias)?;
        if l + 1 < layers {
            h = match spec.activation {
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
            };
        }
    }
    Ok(h)
}

/// Mean cross-entropy of the batch `(x, labels)` under parameters `w`.
pub fn loss_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    w: Var,
    x: Var,
    labels: &[usize],
) -> Result<Var, ModelError> {
    let logits = logits_on_tape(tape, spec, w, x)?;
    Ok(tape.log_softmax_nll(logits, labels)?)
}

/// `∇_w ℓ(w, (x, labels))` as a tape var; differentiable again when
/// `create_graph` is set.
pub fn grad_params_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    w: Var,
    x: Var,
    labels: &[usize],
    create_graph: bool,
) -> Result<Var, ModelError> {
    let loss = loss_on_tape(tape, spec, w, x, labels)?;
    Ok(tape.grad(loss, &[w], create_graph)?[0])
}

fn batch_input(batch: &ImageBatch) -> Tensor {
    Tensor::new(vec![batch.len(), batch.image_len()], batch.pixels.clone())
}

/// Mean cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &ImageBatch) -> Result<f64, ModelError> {
    spec.check_params(w)?;
    spec.check_batch(batch)?;
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::vector(w.to_vec()));
    let x = tape.constant(batch_input(batch));
    let l = loss_on_tape(&mut tape, spec, wv, x, &batch.labels)?;
    Ok(tape.value(l).item())
}

/// `∇_w ℓ(w, batch)`.
pub fn grad_params(spec: &ModelSpec, w: &ParamVector, batch: &ImageBatch) -> Result<ParamVector, ModelError> {
    Ok(loss_and_grad(spec, w, batch)?.1)
}

/// Loss value and its parameter gradient in one pass.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &ImageBatch,
) -> Result<(f64, ParamVector), ModelError> {
    spec.check_params(w)?;
    spec.check_batch(batch)?;
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::vector(w.to_vec()));
    let x = tape.constant(batch_input(batch));
    let l = loss_on_tape(&mut tape, spec, wv, x, &batch.labels)?;
    let value = tape.value(l).item();
    let g = tape.grad_values(l, &[wv])?.remove(0);
    Ok((value, ParamVector(g.into_data())))
}

/// Predicted class per image.
pub fn predict(spec: &ModelSpec, w: &ParamVector, batch: &ImageBatch) -> Result<Vec<usize>, ModelError> {
    spec.check_params(w)?;
    spec.check_batch(batch)?;
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::vector(w.to_vec()));
    let x = tape.constant(batch_input(batch));
    let logits = logits_on_tape(&mut tape, spec, wv, x)?;
    let c = spec.num_classes;
    Ok(tape
        .value(logits)
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &z)| if z > best.1 { (k, z) } else { best })
                .0
        })
        .collect())
}
