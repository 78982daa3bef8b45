//! Feedforward classifier: ReLU hidden layers, softmax output,
//! cross-entropy loss, exact backpropagation and momentum SGD.
//!
//! Weights of a layer are stored row-major with shape `(fan_in, fan_out)`,
//! so the forward pass is a sequence of row-axpy updates. All arithmetic is
//! `f64` and every reduction runs in a fixed order, which makes the forward
//! and backward passes bit-deterministic. Samples with zero weight in
//! [`weighted_loss_and_grad`] are skipped entirely, so a masked gradient over
//! a batch is bitwise identical to the plain gradient over the gathered
//! subset.

use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer sizes from input width to class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape(format!(
                "network needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Shape("layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    /// `input_dim -> hidden... -> classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `(fan_in, fan_out)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }
}

/// A full parameter set. Also used for gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layers: spec
                .layer_sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalars in storage order: per layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        *self
            .iter()
            .nth(index)
            .expect("flat parameter index in range")
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        *self
            .iter_mut()
            .nth(index)
            .expect("flat parameter index in range") = value;
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Network parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub params: Params,
    pub momentum: Params,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_seed: u64,
}

impl NetworkState {
    /// Glorot-uniform weights, zero biases, zero momentum.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = Params::zeros(&spec);
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut layer.weights {
                *w = dist.sample(&mut rng);
            }
        }
        let momentum = Params::zeros(&spec);
        Self {
            spec,
            params,
            momentum,
            epoch: 0,
            rng_seed: seed,
        }
    }

    /// All weights and biases zero; uniform output everywhere.
    pub fn zeros(spec: NetworkSpec) -> Self {
        let params = Params::zeros(&spec);
        let momentum = params.clone();
        Self {
            spec,
            params,
            momentum,
            epoch: 0,
            rng_seed: 0,
        }
    }

    /// Class probabilities, one row per input row.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        let mut probs = self.logits(features)?;
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Ok(probs)
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.check_input(features)?;
        let mut act = features.clone();
        let last = self.params.layers.len() - 1;
        for (l, layer) in self.params.layers.iter().enumerate() {
            act = dense_forward(layer, &act, l != last);
        }
        Ok(act)
    }

    /// Argmax class per row; ties go to the smallest class index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "feature width {} does not match network input {}",
                features.cols(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }
}

fn dense_forward(layer: &Dense, input: &Matrix, relu: bool) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), layer.fan_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(&layer.biases);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let w = &layer.weights[j * layer.fan_out..(j + 1) * layer.fan_out];
            for (oi, &wi) in o.iter_mut().zip(w) {
                *oi += xj * wi;
            }
        }
        if relu {
            for v in o.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

/// Numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value; smallest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(logits)[label]` via log-sum-exp.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    sum.ln() - (logits[label] - max)
}

/// A mini-batch drawn from a training view.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sample_indices: Vec<usize>,
    pub features: Matrix,
    /// Noisy labels.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(sample_indices: Vec<usize>, features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() || sample_indices.len() != labels.len() {
            return Err(Error::Shape(format!(
                "batch of {} indices, {} feature rows, {} labels",
                sample_indices.len(),
                features.rows(),
                labels.len()
            )));
        }
        let mut seen = sample_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("duplicate sample index in batch".into()));
        }
        Ok(Self {
            sample_indices,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch keeping the rows at the given batch positions.
    pub fn select(&self, positions: &[usize]) -> Batch {
        Batch {
            sample_indices: positions.iter().map(|&p| self.sample_indices[p]).collect(),
            features: self.features.gather_rows(positions),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Params,
    pub per_sample_losses: Vec<f64>,
    /// Argmax class of every row, from the same forward pass.
    pub predictions: Vec<usize>,
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(batch: &Batch, state: &NetworkState) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let weights = vec![w; batch.len()];
    weighted_loss_and_grad(&batch.features, &batch.labels, &weights, state)
}

/// Loss `sum_i weights[i] * CE(x_i, labels[i])` and its gradient.
///
/// Rows with zero weight contribute nothing and are skipped in the backward
/// pass; their per-sample losses are still reported.
pub fn weighted_loss_and_grad(
    features: &Matrix,
    labels: &[usize],
    weights: &[f64],
    state: &NetworkState,
) -> Result<LossGrad> {
    state.check_input(features)?;
    let n = features.rows();
    if labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let k = state.spec.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let layers = &state.params.layers;
    let last = layers.len() - 1;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(features.clone());
    for (l, layer) in layers.iter().enumerate() {
        let next = dense_forward(layer, &acts[l], l != last);
        acts.push(next);
    }
    let logits = acts.pop().unwrap();

    let predictions: Vec<usize> = logits.iter_rows().map(argmax).collect();
    let mut per_sample = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut delta = Matrix::zeros(n, k);
    for r in 0..n {
        let z = logits.row(r);
        let ce = cross_entropy(z, labels[r]);
        per_sample.push(ce);
        if weights[r] == 0.0 {
            continue;
        }
        loss += weights[r] * ce;
        let d = delta.row_mut(r);
        d.copy_from_slice(z);
        softmax_in_place(d);
        d[labels[r]] -= 1.0;
        for v in d.iter_mut() {
            *v *= weights[r];
        }
    }

    let mut grad = Params::zeros(&state.spec);
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = &acts[l];
        let g = &mut grad.layers[l];
        for r in 0..n {
            if weights[r] == 0.0 {
                continue;
            }
            let d = delta.row(r);
            for (gb, &dv) in g.biases.iter_mut().zip(d) {
                *gb += dv;
            }
            for (j, &aj) in input.row(r).iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                let gw = &mut g.weights[j * layer.fan_out..(j + 1) * layer.fan_out];
                for (gwi, &dv) in gw.iter_mut().zip(d) {
                    *gwi += aj * dv;
                }
            }
        }
        if l > 0 {
            let mut prev = Matrix::zeros(n, layer.fan_in);
            for r in 0..n {
                if weights[r] == 0.0 {
                    continue;
                }
                let d = delta.row(r);
                let a = input.row(r);
                let p = prev.row_mut(r);
                for j in 0..layer.fan_in {
                    // ReLU: a = max(z, 0), so z > 0 iff a > 0.
                    if a[j] <= 0.0 {
                        continue;
                    }
                    let w = &layer.weights[j * layer.fan_out..(j + 1) * layer.fan_out];
                    let mut s = 0.0;
                    for (&wi, &dv) in w.iter().zip(d) {
                        s += wi * dv;
                    }
                    p[j] = s;
                }
            }
            delta = prev;
        }
    }

    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(LossGrad {
        loss,
        grad,
        per_sample_losses: per_sample,
        predictions,
    })
}

/// Per-sample cross-entropy against the given labels, no gradient.
pub fn per_sample_losses(
    features: &Matrix,
    labels: &[usize],
    state: &NetworkState,
) -> Result<Vec<f64>> {
    let logits = state.logits(features)?;
    if labels.len() != logits.rows() {
        return Err(Error::Shape("label count does not match rows".into()));
    }
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(z, &y)| cross_entropy(z, y))
        .collect())
}

/// Momentum SGD with step-decayed learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    /// Fractions of `total_epochs` at which the rate is divided by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            batch_size: 128,
            total_epochs: 120,
            decay_points: vec![0.5, 0.75],
            decay_factor: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.total_epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.decay_points.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return bad("decay_points", "each point must lie in (0, 1)");
        }
        if self.decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_points", "must be strictly increasing");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor", "must be positive");
        }
        Ok(())
    }

    /// Learning rate used during the epoch with 0-based index `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .decay_points
            .iter()
            .filter(|&&p| epoch as f64 >= (p * self.total_epochs as f64 - 1e-9).ceil())
            .count();
        self.base_lr / self.decay_factor.powi(passed as i32)
    }
}

/// `v <- momentum * v + grad; params <- params - lr(epoch) * v`.
pub fn sgd_step(
    state: &mut NetworkState,
    grad: &Params,
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    if !state.params.same_shape(grad) {
        return Err(Error::Shape(
            "gradient shape does not match parameters".into(),
        ));
    }
    let lr = config.lr_at(epoch);
    let mu = config.momentum;
    for ((p, v), g) in state
        .params
        .layers
        .iter_mut()
        .zip(&mut state.momentum.layers)
        .zip(&grad.layers)
    {
        for ((pw, vw), gw) in p.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
            *vw = mu * *vw + gw;
            *pw -= lr * *vw;
        }
        for ((pb, vb), gb) in p.biases.iter_mut().zip(&mut v.biases).zip(&g.biases) {
            *vb = mu * *vb + gb;
            *pb -= lr * *vb;
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax prediction differs from `labels`.
pub fn evaluate_error(features: &Matrix, labels: &[usize], state: &NetworkState) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::Shape("cannot evaluate on an empty set".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape("label count does not match rows".into()));
    }
    let preds = state.predict(features)?;
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"PSTP1";

/// Binary checkpoint: magic, `u32` layer count, `u32` layer sizes, then
/// little-endian `f64` params and momentum buffers in storage order.
pub fn write_checkpoint<W: Write>(state: &NetworkState, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let sizes = &state.spec.layer_sizes;
    out.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for &s in sizes {
        out.write_all(&(s as u32).to_le_bytes())?;
    }
    for v in state.params.iter().chain(state.momentum.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetworkState> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint magic mismatch".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        sizes.push(u32::from_le_bytes(word) as usize);
    }
    let spec = NetworkSpec::new(sizes)?;
    let mut state = NetworkState::zeros(spec);
    let mut buf = [0u8; 8];
    for v in state.params.iter_mut().chain(state.momentum.iter_mut()) {
        input.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(state)
}
