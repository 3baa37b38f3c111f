//! Two-hidden-layer perceptron with hand-written backprop and Adam.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// `in -> h1 -> h2 -> out` with ReLU on both hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: OutputActivation,
}

fn check_dims(dims: &[usize]) -> Result<[usize; 4]> {
    match dims {
        &[a, b, c, d] if a >= 1 && b >= 1 && c >= 1 && d >= 1 => Ok([a, b, c, d]),
        _ => Err(Error::Config(format!(
            "MLP needs exactly 4 positive layer sizes, got {dims:?}"
        ))),
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Hidden-layer inputs to the two ReLUs.
    pub fn pre_activations(&self) -> [&[f64]; 2] {
        [&self.pre1, &self.pre2]
    }
}

impl Mlp {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, identity output.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        Self::init_with(dims, seed, OutputActivation::Identity)
    }

    pub fn init_with(dims: &[usize], seed: u64, output: OutputActivation) -> Result<Self> {
        let mut net = Self::zeros_with(dims, output)?;
        let mut rng = seeded_rng(seed);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::zeros_with(dims, OutputActivation::Identity)
    }

    pub fn zeros_with(dims: &[usize], output: OutputActivation) -> Result<Self> {
        let d = check_dims(dims)?;
        Ok(Self {
            layers: d.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [
            self.layers[0].inputs,
            self.layers[0].outputs,
            self.layers[1].outputs,
            self.layers[2].outputs,
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].outputs
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut pre1 = Vec::with_capacity(self.layers[0].outputs);
        self.layers[0].affine(x, &mut pre1);
        let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let mut pre2 = Vec::with_capacity(self.layers[1].outputs);
        self.layers[1].affine(&act1, &mut pre2);
        let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
        let mut output = Vec::with_capacity(self.layers[2].outputs);
        self.layers[2].affine(&act2, &mut output);
        if self.output == OutputActivation::Tanh {
            output.iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok(Trace {
            input: x.to_vec(),
            pre1,
            act1,
            pre2,
            act2,
            output,
        })
    }

    /// Accumulates parameter gradients of a scalar loss into `grads` given
    /// `d loss / d output`, and returns `d loss / d input`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut g: Vec<f64> = grad_out.to_vec();
        if self.output == OutputActivation::Tanh {
            for (gi, y) in g.iter_mut().zip(&trace.output) {
                *gi *= 1.0 - y * y;
            }
        }
        let inputs = [&trace.input, &trace.act1, &trace.act2];
        let pres = [None, Some(&trace.pre1), Some(&trace.pre2)];
        for idx in (0..3).rev() {
            let layer = &self.layers[idx];
            let grad = &mut grads.layers[idx];
            let x = inputs[idx];
            for (o, go) in g.iter().enumerate() {
                grad.biases[o] += go;
                let row = &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, xi) in row.iter_mut().zip(x.iter()) {
                    *w += go * xi;
                }
            }
            let mut gin = vec![0.0; layer.inputs];
            for (o, go) in g.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gi, w) in gin.iter_mut().zip(row) {
                    *gi += go * w;
                }
            }
            if let Some(pre) = pres[idx] {
                for (gi, p) in gin.iter_mut().zip(pre.iter()) {
                    if *p <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = gin;
        }
        g
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Polyak averaging: `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            for (d, s) in dst
                .weights
                .iter_mut()
                .chain(dst.biases.iter_mut())
                .zip(src.weights.iter().chain(&src.biases))
            {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dims: self.dims().to_vec(),
            output: self.output,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    weights: l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect(),
                    biases: l.biases.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::zeros_with(&ckpt.dims, ckpt.output)?;
        if ckpt.layers.len() != 3 {
            return Err(Error::Config(format!(
                "checkpoint has {} layers, expected 3",
                ckpt.layers.len()
            )));
        }
        for (layer, saved) in net.layers.iter_mut().zip(&ckpt.layers) {
            let shape_ok = saved.weights.len() == layer.outputs
                && saved.weights.iter().all(|r| r.len() == layer.inputs)
                && saved.biases.len() == layer.outputs;
            if !shape_ok {
                return Err(Error::Config("checkpoint layer shape disagrees with dims".into()));
            }
            layer.weights = saved.weights.concat();
            layer.biases = saved.biases.clone();
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// On-disk parameter format: dims header plus per-layer matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub output: OutputActivation,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Parameter-shaped buffer (gradients, Adam moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|v| *v *= k);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
            let gs = g.weights.iter().chain(&g.biases);
            let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
            let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
            for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Mean squared error over all batch elements and outputs, with its gradient.
pub fn mse_loss_and_grads(net: &Mlp, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let out_dim = net.output_dim();
    let denom = (batch.len() * out_dim) as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (x, target) in batch {
        if target.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                got: target.len(),
            });
        }
        let trace = net.trace(x)?;
        let grad_out: Vec<f64> = trace
            .output
            .iter()
            .zip(target)
            .map(|(y, t)| {
                loss += (y - t) * (y - t);
                2.0 * (y - t) / denom
            })
            .collect();
        net.backward(&trace, &grad_out, &mut grads);
    }
    Ok((loss / denom, grads))
}

/// One Adam step on the batch MSE; returns the loss before the update.
pub fn train_step(net: &mut Mlp, optim: &mut Adam, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let (loss, grads) = mse_loss_and_grads(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    optim.update(net, &grads);
    Ok(loss)
}
