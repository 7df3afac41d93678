//! Small dense feed-forward networks with hand-written backpropagation and
//! Adam. Hidden layers share one nonlinearity; the output layer is linear.
//!
//! Parameters live in one flat buffer, layer by layer, each layer stored as
//! its row-major `out x in` weight matrix followed by its bias vector. The
//! gradient buffer uses the same layout, which keeps the optimizer a plain
//! elementwise loop.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    /// Start of each layer's weight block in `params`.
    offsets: Vec<usize>,
}

/// Per-layer values recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `outputs[0]` is the input; `outputs[k]` the output of layer `k`.
    pub outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("trace has at least the input")
    }
}

/// Gradient buffer laid out like [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(vec![0.0; net.params.len()])
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

fn layout(dims: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut total = 0;
    for w in dims.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::usage(format!(
                "an MLP needs at least two non-zero layer dims, got {layer_dims:?}"
            )));
        }
        let (offsets, total) = layout(layer_dims);
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            activation,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// He init for ReLU, Xavier for tanh; zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        for k in 0..net.n_layers() {
            let (fan_in, fan_out) = (layer_dims[k], layer_dims[k + 1]);
            let std = match activation {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let off = net.offsets[k];
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block of layer `k` (row-major `out x in`) and its bias.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.layer_dims[k], self.layer_dims[k + 1]);
        let off = self.offsets[k];
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.layer_dims[k], self.layer_dims[k + 1]);
        let off = self.offsets[k];
        let (w, b) = self.params[off..off + i * o + o].split_at_mut(i * o);
        (w, b)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::usage(format!(
                "input length {} does not match network input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.outputs.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut outputs = Vec::with_capacity(self.layer_dims.len());
        outputs.push(input.to_vec());
        let last = self.n_layers() - 1;
        for k in 0..self.n_layers() {
            let (w, b) = self.layer(k);
            let x = &outputs[k];
            let n_in = x.len();
            let mut y: Vec<f64> = b.to_vec();
            for (j, yj) in y.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                *yj += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if k != last {
                    *yj = self.activation.apply(*yj);
                }
            }
            outputs.push(y);
        }
        Ok(Trace { outputs })
    }

    /// Activations of the last hidden layer (the embedding used for
    /// diversity sampling). For a network without hidden layers this is the
    /// input itself.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut t = self.forward_trace(input)?;
        let n = t.outputs.len();
        Ok(t.outputs.swap_remove(n - 2))
    }

    /// Accumulate `d(upstream . output)/d(params)` into `grads` and return the
    /// gradient with respect to the input.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::usage(format!(
                "upstream gradient length {} does not match output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if trace.outputs.len() != self.layer_dims.len() || grads.0.len() != self.params.len() {
            return Err(Error::usage("trace or gradient buffer does not belong to this network"));
        }
        let last = self.n_layers() - 1;
        let mut delta = upstream.to_vec();
        for k in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_dims[k], self.layer_dims[k + 1]);
            if k != last {
                let y = &trace.outputs[k + 1];
                for (d, &yj) in delta.iter_mut().zip(y) {
                    *d *= self.activation.grad_from_output(yj);
                }
            }
            let x = &trace.outputs[k];
            let off = self.offsets[k];
            let (gw, gb) = grads.0[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                gb[j] += dj;
                for (g, &xi) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                    *g += dj * xi;
                }
            }
            let (w, _) = self.layer(k);
            let mut next = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (n, &wji) in next.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *n += dj * wji;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Parameter gradients and input gradient of `upstream . forward(input)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut g = Gradients::zeros_like(self);
        let gin = self.backward_into(&trace, upstream, &mut g)?;
        Ok((g, gin))
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            layers: (0..self.n_layers())
                .map(|k| {
                    let (w, b) = self.layer(k);
                    LayerTensor {
                        weights: w.to_vec(),
                        biases: b.to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        let mut net = Self::zeros(&ck.layer_dims, ck.activation).map_err(|e| Error::schema(e.to_string()))?;
        if ck.layers.len() != net.n_layers() {
            return Err(Error::schema(format!(
                "checkpoint has {} layers, dims imply {}",
                ck.layers.len(),
                net.n_layers()
            )));
        }
        for (k, layer) in ck.layers.iter().enumerate() {
            let (i, o) = (ck.layer_dims[k], ck.layer_dims[k + 1]);
            if layer.weights.len() != i * o || layer.biases.len() != o {
                return Err(Error::schema(format!("checkpoint layer {k} has wrong tensor sizes")));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("checkpoint layer {k} has non-finite values")));
            }
            let (w, b) = net.layer_mut(k);
            w.copy_from_slice(&layer.weights);
            b.copy_from_slice(&layer.biases);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// JSON form of a network: a dims header plus per-layer tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensor {
    /// Row-major `out x in`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; net.params.len()],
            v: vec![0.0; net.params.len()],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.0.len() != net.params.len() || self.m.len() != net.params.len() {
            return Err(Error::usage("optimizer state, gradients and network disagree in size"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in net.params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
