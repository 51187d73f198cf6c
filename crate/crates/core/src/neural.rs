//! Dense feed-forward networks trained with Adam, either on labelled data
//! (smooth-L1) or from externally computed output gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, NumericError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation; constant features get `std = 1`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let first = rows.first().ok_or(NumericError::Empty("standardizer rows"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            check_len(d, r.len())?;
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward_into(&self, x: &[f64], act: Activation, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.n_in).zip(&self.bias).map(|(row, b)| {
            let z: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b;
            act.apply(z)
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Applied by [`Mlp::predict`]; [`Mlp::forward`] expects standardized input.
    pub standardizer: Standardizer,
}

/// Per-layer activations of one forward pass, input first.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients with the same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(model: &Mlp) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.bias)
            .all(|g| g.iter().all(|&x| x == 0.0))
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), NumericError> {
    if expected == got {
        Ok(())
    } else {
        Err(NumericError::Dimension { expected, got })
    }
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self, NumericError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NumericError::InvalidParameter(format!(
                "layer sizes {layer_sizes:?} need at least two non-empty layers"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    n_in: w[0],
                    n_out: w[1],
                    weights: (0..w[0] * w[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden_activation,
            output_activation,
            standardizer: Standardizer::identity(layer_sizes[0]),
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NumericError> {
        check_len(self.n_inputs(), x.len())?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, self.activation(k), &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NumericError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Standardizes a raw feature vector, then runs [`Mlp::forward`].
    pub fn predict(&self, raw: &[f64]) -> Result<Vec<f64>, NumericError> {
        check_len(self.n_inputs(), raw.len())?;
        self.forward(&self.standardizer.transform(raw))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace, NumericError> {
        check_len(self.n_inputs(), x.len())?;
        let mut activations = vec![x.to_vec()];
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.n_out);
            layer.forward_into(activations.last().unwrap(), self.activation(k), &mut out);
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dy` at the output.
    pub fn backward(
        &self,
        trace: &Trace,
        dl_dy: &[f64],
        grads: &mut Gradients,
    ) -> Result<(), NumericError> {
        check_len(self.n_outputs(), dl_dy.len())?;
        let mut delta: Vec<f64> = dl_dy
            .iter()
            .zip(trace.output())
            .map(|(g, &y)| g * self.output_activation.derivative(y))
            .collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.activations[k];
            let gw = &mut grads.weights[k];
            for (o, &d) in delta.iter().enumerate() {
                grads.bias[k][o] += d;
                if d != 0.0 {
                    for (g, &x) in gw[o * layer.n_in..(o + 1) * layer.n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let act = self.activation(k - 1);
            let mut prev = vec![0.0; layer.n_in];
            for (row, &d) in layer.weights.chunks_exact(layer.n_in).zip(&delta) {
                if d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                *p *= act.derivative(a);
            }
            delta = prev;
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NumericError> {
        check_len(self.n_params(), p.len())?;
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(NumericError::InvalidParameter(
                "learning rate and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NumericError::InvalidParameter("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(model: &Mlp, cfg: &TrainConfig) -> Self {
        let n = model.n_params();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let g = grads.flatten();
        let mut p = model.params();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        model.set_params(&p).expect("parameter count is fixed");
    }
}

/// Mean smooth-L1 loss and its gradient with respect to `pred`.
pub fn smooth_l1(pred: &[f64], label: &[f64], beta: f64) -> Result<(f64, Vec<f64>), NumericError> {
    if !(beta > 0.0) {
        return Err(NumericError::InvalidParameter(format!("smooth-L1 beta {beta} must be positive")));
    }
    check_len(pred.len(), label.len())?;
    if pred.is_empty() {
        return Err(NumericError::Empty("smooth-L1 input"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(label)
        .map(|(p, l)| {
            let d = p - l;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                d / beta / n
            } else {
                loss += d.abs() - 0.5 * beta;
                d.signum() / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mini-batch Adam on smooth-L1 (`beta = 1`). `xs` must already be
/// standardized. Returns the mean loss of every epoch.
pub fn train_supervised(
    model: &mut Mlp,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(NumericError::Empty("training set").into());
    }
    check_len(xs.len(), ys.len())?;
    let mut adam = Adam::new(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros(model);
            let mut batch_loss = 0.0;
            for &i in batch {
                let trace = model.forward_trace(&xs[i])?;
                let (loss, g) = smooth_l1(trace.output(), &ys[i], 1.0)?;
                batch_loss += loss;
                model.backward(&trace, &g, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(NumericError::NonFiniteLoss { epoch, batch: b }.into());
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model, &grads);
            total += batch_loss;
        }
        history.push(total / xs.len() as f64);
    }
    Ok(history)
}

/// Backpropagates externally supplied output gradients `dl_da[i]` for the
/// standardized inputs `xs[i]`, averages over the batch and applies one
/// Adam step. Returns the averaged gradient.
pub fn backprop_action_grads(
    model: &mut Mlp,
    adam: &mut Adam,
    xs: &[Vec<f64>],
    dl_da: &[Vec<f64>],
) -> Result<Gradients, NumericError> {
    check_len(xs.len(), dl_da.len())?;
    if xs.is_empty() {
        return Err(NumericError::Empty("action-gradient batch"));
    }
    let mut grads = Gradients::zeros(model);
    for (x, g) in xs.iter().zip(dl_da) {
        let trace = model.forward_trace(x)?;
        model.backward(&trace, g, &mut grads)?;
    }
    grads.scale(1.0 / xs.len() as f64);
    adam.step(model, &grads);
    Ok(grads)
}

pub const MODEL_FORMAT: &str = "pqflex-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    /// Hash of the configuration the model was trained under.
    pub config_hash: Option<String>,
    pub model: Mlp,
}

impl Mlp {
    /// Layer shapes agree with `layer_sizes` and all parameters are finite.
    pub fn is_well_formed(&self) -> bool {
        let shape_ok = self.layers.len() + 1 == self.layer_sizes.len()
            && self.layers.iter().enumerate().all(|(k, l)| {
                l.n_in == self.layer_sizes[k]
                    && l.n_out == self.layer_sizes[k + 1]
                    && l.weights.len() == l.n_in * l.n_out
                    && l.bias.len() == l.n_out
            })
            && self.standardizer.mean.len() == self.layer_sizes[0]
            && self.standardizer.std.len() == self.layer_sizes[0];
        shape_ok && self.is_finite()
    }
}

pub fn save_model(path: &Path, model: &Mlp, config_hash: Option<&str>) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        config_hash: config_hash.map(str::to_owned),
        model: model.clone(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported model container {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    if !file.model.is_well_formed() {
        return Err(Error::Config(format!("{}: malformed model", path.display())));
    }
    Ok(file)
}
