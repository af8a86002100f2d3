use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Identity,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::LeakyRelu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::LeakyRelu,
            1 => Activation::Sigmoid,
            2 => Activation::Identity,
            3 => Activation::Softmax,
            _ => return None,
        })
    }

    fn apply(self, z: &mut [f64]) {
        match self {
            Activation::LeakyRelu => z.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= LEAKY_SLOPE
                }
            }),
            Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Identity => {}
            Activation::Softmax => softmax_in_place(z),
        }
    }

    /// Turns `grad` (dL/d output) into dL/d pre-activation, given the
    /// layer's output `a`.
    fn backprop(self, a: &[f64], grad: &mut [f64]) {
        match self {
            Activation::LeakyRelu => grad.iter_mut().zip(a).for_each(|(g, &a)| {
                if a < 0.0 {
                    *g *= LEAKY_SLOPE
                }
            }),
            Activation::Sigmoid => grad.iter_mut().zip(a).for_each(|(g, &a)| *g *= a * (1.0 - a)),
            Activation::Identity => {}
            Activation::Softmax => {
                let dot: f64 = grad.iter().zip(a).map(|(g, a)| g * a).sum();
                grad.iter_mut().zip(a).for_each(|(g, &a)| *g = a * (*g - dot));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Fully connected layer. `weights` is `[out, in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, activation: Activation) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let values = (0..input * output).map(|_| rng.random_range(-limit..limit)).collect();
        Dense {
            weights: Tensor::from_vec(&[output, input], values).expect("shape"),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.rows()] {
            return Err(Error::ShapeMismatch {
                expected: vec![weights.rows()],
                got: bias.shape().to_vec(),
            });
        }
        Ok(Dense {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward_rows(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        let w = &self.weights.values;
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xb = &x[b * n_in..(b + 1) * n_in];
            let ob = &mut out[b * n_out..(b + 1) * n_out];
            for (o, slot) in ob.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *slot = self.bias.values[o] + dot(row, xb);
            }
            self.activation.apply(ob);
        }
        out
    }

    /// dL/d pre-activation from dL/d output.
    fn delta(&self, a: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let n_out = self.output_dim();
        let mut delta = grad_out.to_vec();
        for (d, a) in delta.chunks_mut(n_out).zip(a.chunks(n_out)) {
            self.activation.backprop(a, d);
        }
        delta
    }

    fn input_grad(&self, delta: &[f64], batch: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        let w = &self.weights.values;
        let mut g = vec![0.0; batch * n_in];
        for b in 0..batch {
            let gb = &mut g[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let d = delta[b * n_out + o];
                if d != 0.0 {
                    axpy(d, &w[o * n_in..(o + 1) * n_in], gb);
                }
            }
        }
        g
    }

    fn accumulate(&mut self, delta: &[f64], x: &[f64], batch: usize) {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        for b in 0..batch {
            let xb = &x[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let d = delta[b * n_out + o];
                if d != 0.0 {
                    axpy(d, xb, &mut self.weights.grad[o * n_in..(o + 1) * n_in]);
                    self.bias.grad[o] += d;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations recorded by [`DenseNet::forward`]: `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    dims: Vec<usize>,
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output_tensor(&self) -> Tensor {
        let cols = *self.dims.last().unwrap();
        Tensor::from_vec(&[self.batch, cols], self.output().to_vec()).expect("shape")
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    expected: vec![pair[0].output_dim()],
                    got: vec![pair[1].input_dim()],
                });
            }
        }
        Ok(DenseNet { layers })
    }

    /// Layers of widths `dims`, `hidden` activation between them and
    /// `output` on the last layer.
    pub fn mlp<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::new(rng, dims[i], dims[i + 1], act)
            })
            .collect();
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    /// Zeroes the final layer's weights and biases.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.values.iter_mut().for_each(|v| *v = 0.0);
        last.bias.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.input_dim()],
                got: vec![x.len()],
            });
        }
        Ok(())
    }

    /// Forward pass over `batch` row-major samples, recording activations.
    pub fn forward_rows(&self, x: &[f64], batch: usize) -> Result<Trace> {
        self.check_input(x, batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward_rows(acts.last().unwrap(), batch);
            acts.push(next);
        }
        Ok(Trace {
            batch,
            dims: self.dims(),
            acts,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![x.rows(), self.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        let batch = if x.shape().len() == 1 { 1 } else { x.rows() };
        self.forward_rows(&x.values, batch)
    }

    /// Inference without keeping intermediates.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward_rows(&cur, batch);
        }
        Ok(cur)
    }

    fn check_trace(&self, trace: &Trace, grad_out: &[f64]) -> Result<()> {
        if trace.dims != self.dims() {
            return Err(Error::TraceMismatch);
        }
        if grad_out.len() != trace.output().len() {
            return Err(Error::ShapeMismatch {
                expected: vec![trace.batch, self.output_dim()],
                got: vec![grad_out.len()],
            });
        }
        Ok(())
    }

    /// Accumulates dL/d parameters (summed over the batch) into each
    /// parameter's `grad` and returns dL/d input.
    pub fn backward(&mut self, trace: &Trace, grad_out: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(trace, grad_out)?;
        let mut grad = grad_out.to_vec();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let delta = layer.delta(&trace.acts[l + 1], &grad);
            layer.accumulate(&delta, &trace.acts[l], trace.batch);
            grad = layer.input_grad(&delta, trace.batch);
        }
        Ok(grad)
    }

    /// dL/d input without touching parameter gradients.
    pub fn input_gradient(&self, trace: &Trace, grad_out: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(trace, grad_out)?;
        let mut grad = grad_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta = layer.delta(&trace.acts[l + 1], &grad);
            grad = layer.input_grad(&delta, trace.batch);
        }
        Ok(grad)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter();
        for t in self.params_mut() {
            t.values.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().flat_map(|t| t.grad.iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }
}
