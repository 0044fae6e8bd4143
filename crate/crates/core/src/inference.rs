//! A small fully-connected network engine.
//!
//! Parameters live in a [`FlatVector`] under the schema produced by
//! [`MlpSpec::schema`]: layer `l` owns `layer{l}.weight` with shape
//! `[out, in]` and `layer{l}.bias` with shape `[out]`, and computes
//! `z = W a + b`. Hidden layers apply the activation; the last layer emits
//! logits. All arithmetic runs in f64 on a widened copy of the weights.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::merging::{FisherState, Gram, GramState};
use crate::rng;
use crate::tensor::{FlatVector, ParamSchema};

const INIT_STREAM: u64 = 1 << 63 | 1;
const TRAIN_STREAM: u64 = 1 << 63 | 2;
const FISHER_STREAM: u64 = 1 << 63 | 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("weights do not match the network schema: {0}")]
    SchemaMismatch(String),
    #[error("expected {expected} input features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    /// `(input, hidden..., classes)`
    pub layer_dims: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self, InferenceError> {
        let spec = Self {
            layer_dims,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input → 16 → 16 → classes` with tanh.
    pub fn toy(input: usize, classes: usize) -> Self {
        Self {
            layer_dims: vec![input, 16, 16, classes],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.layer_dims.len() < 2 {
            return Err(InferenceError::InvalidSpec(
                "need at least one linear layer".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(InferenceError::InvalidSpec(
                "layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn schema(&self) -> Arc<ParamSchema> {
        let entries = self.layer_dims.windows(2).enumerate().flat_map(|(l, w)| {
            [
                (Self::weight_name(l), vec![w[1], w[0]]),
                (Self::bias_name(l), vec![w[1]]),
            ]
        });
        Arc::new(ParamSchema::new(entries).expect("layer names are unique"))
    }
}

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, InferenceError> {
        if rows * cols != data.len() {
            return Err(InferenceError::InvalidBatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, InferenceError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(InferenceError::InvalidBatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Labelled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, InferenceError> {
        if features.rows() != labels.len() {
            return Err(InferenceError::InvalidBatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// First `n` examples (clamped to the batch length).
    pub fn prefix(&self, n: usize) -> Batch {
        let n = n.min(self.len());
        let cols = self.features.cols();
        Batch {
            features: Matrix {
                rows: n,
                cols,
                data: self.features.data[..n * cols].to_vec(),
            },
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let cols = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Batch {
            features: Matrix {
                rows: indices.len(),
                cols,
                data,
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch, InferenceError> {
        let cols = parts.first().map_or(0, |b| b.input_dim());
        if parts.iter().any(|b| b.input_dim() != cols) {
            return Err(InferenceError::InvalidBatch(
                "cannot concatenate batches of different widths".into(),
            ));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in parts {
            data.extend_from_slice(&b.features.data);
            labels.extend_from_slice(&b.labels);
        }
        Ok(Batch {
            features: Matrix {
                rows: labels.len(),
                cols,
                data,
            },
            labels,
        })
    }

    fn check(&self, spec: &MlpSpec) -> Result<(), InferenceError> {
        if self.input_dim() != spec.input_dim() {
            return Err(InferenceError::DimensionMismatch {
                expected: spec.input_dim(),
                actual: self.input_dim(),
            });
        }
        let classes = spec.classes();
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(InferenceError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    weight: usize,
    bias: usize,
    inputs: usize,
    outputs: usize,
}

/// A network with f64 parameters laid out in schema order.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    schema: Arc<ParamSchema>,
    layers: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Per-example intermediate values kept for the backward pass.
struct Activations {
    /// `inputs[l]` is the input of layer `l`; the final entry holds the logits.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn from_flat(spec: &MlpSpec, weights: &FlatVector) -> Result<Self, InferenceError> {
        spec.validate()?;
        let schema = spec.schema();
        if *weights.schema().as_ref() != *schema {
            return Err(InferenceError::SchemaMismatch(format!(
                "expected {} parameters in {} tensors, got {} in {}",
                schema.dim(),
                schema.slots().len(),
                weights.len(),
                weights.schema().slots().len()
            )));
        }
        let params = weights.values().iter().map(|&v| f64::from(v)).collect();
        Ok(Self::assemble(
            spec.clone(),
            weights.schema().clone(),
            params,
        ))
    }

    /// Builds a network directly from f64 parameters in schema order.
    pub fn from_params(spec: &MlpSpec, params: Vec<f64>) -> Result<Self, InferenceError> {
        spec.validate()?;
        let schema = spec.schema();
        if params.len() != schema.dim() {
            return Err(InferenceError::SchemaMismatch(format!(
                "expected {} parameters, got {}",
                schema.dim(),
                params.len()
            )));
        }
        Ok(Self::assemble(spec.clone(), schema, params))
    }

    fn assemble(spec: MlpSpec, schema: Arc<ParamSchema>, params: Vec<f64>) -> Self {
        let layers = spec
            .layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerLayout {
                weight: schema
                    .slot(&MlpSpec::weight_name(l))
                    .expect("schema")
                    .offset,
                bias: schema.slot(&MlpSpec::bias_name(l)).expect("schema").offset,
                inputs: w[0],
                outputs: w[1],
            })
            .collect();
        Self {
            spec,
            schema,
            layers,
            params,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn to_flat(&self) -> FlatVector {
        let values = self.params.iter().map(|&v| v as f32).collect();
        FlatVector::new(self.schema.clone(), values).expect("schema dimension")
    }

    fn run(&self, x: &[f64]) -> Activations {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &inputs[l];
            let w = &self.params[layer.weight..layer.weight + layer.inputs * layer.outputs];
            let b = &self.params[layer.bias..layer.bias + layer.outputs];
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter().zip(a).fold(b[o], |acc, (wi, ai)| acc + wi * ai)
                })
                .collect();
            let out = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            pre.push(z);
            inputs.push(out);
        }
        Activations { inputs, pre }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).inputs.pop().expect("at least one layer")
    }

    /// Adds `scale * ∇θ log p(y | x)` into `grad` and returns `log p(y | x)`.
    pub fn accumulate_log_prob_grad(
        &self,
        x: &[f64],
        y: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let acts = self.run(x);
        let logits = acts.inputs.last().expect("logits");
        let probs = softmax(logits);
        let log_p = log_softmax_at(logits, y);

        // d log p / d logits = onehot(y) - softmax
        let mut delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| if c == y { 1.0 - p } else { -p })
            .collect();

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts.inputs[l];
            for o in 0..layer.outputs {
                let d = delta[o] * scale;
                grad[layer.bias + o] += d;
                let row = &mut grad[layer.weight + o * layer.inputs..][..layer.inputs];
                for (g, &ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[layer.weight..layer.weight + layer.inputs * layer.outputs];
            let prev_pre = &acts.pre[l - 1];
            delta = (0..layer.inputs)
                .map(|i| {
                    let back: f64 = (0..layer.outputs)
                        .map(|o| w[o * layer.inputs + i] * delta[o])
                        .sum();
                    back * self.spec.activation.derivative(prev_pre[i], a[i])
                })
                .collect();
        }
        log_p
    }

    /// `∇θ log p(y | x)` in schema order.
    pub fn log_prob_grad(&self, x: &[f64], y: usize) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let lp = self.accumulate_log_prob_grad(x, y, 1.0, &mut grad);
        (lp, grad)
    }

    pub fn log_prob(&self, x: &[f64], y: usize) -> f64 {
        log_softmax_at(&self.logits(x), y)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
    logits[y] - lse
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
) -> Result<Matrix, InferenceError> {
    let net = Mlp::from_flat(spec, weights)?;
    if batch.input_dim() != spec.input_dim() {
        return Err(InferenceError::DimensionMismatch {
            expected: spec.input_dim(),
            actual: batch.input_dim(),
        });
    }
    let classes = spec.classes();
    let mut data = Vec::with_capacity(batch.len() * classes);
    for x in batch.features.iter_rows() {
        data.extend(net.logits(x));
    }
    Ok(Matrix {
        rows: batch.len(),
        cols: classes,
        data,
    })
}

pub fn predict(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
) -> Result<Vec<usize>, InferenceError> {
    let logits = forward(spec, weights, batch)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
) -> Result<f64, InferenceError> {
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    batch.check(spec)?;
    let predictions = predict(spec, weights, batch)?;
    Ok(accuracy_of(&predictions, &batch.labels))
}

/// Unweighted mean of per-class F1 over the classes present in labels or
/// predictions.
pub fn macro_f1(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
) -> Result<f64, InferenceError> {
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    batch.check(spec)?;
    let predictions = predict(spec, weights, batch)?;
    Ok(macro_f1_of(&predictions, &batch.labels, spec.classes()))
}

/// Accuracy of precomputed predictions; `NaN` when there are none.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Macro-F1 of precomputed predictions, which must lie below `classes`.
pub fn macro_f1_of(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp[c] as f64 / denom as f64;
    }
    total / present as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FisherLabels {
    /// Labels drawn from the model's own predictive distribution.
    #[default]
    Sampled,
    /// The batch's labels.
    Empirical,
}

/// Diagonal Fisher: the mean over `draws` examples of the squared gradient of
/// `log p(y | x)`. Example `m` is `batch[m % len]`; in sampled mode its label is
/// drawn from the model's softmax using the stream keyed by `seed`.
pub fn fisher_diagonal(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
    labels: FisherLabels,
    draws: usize,
    seed: u64,
) -> Result<FisherState, InferenceError> {
    if draws == 0 {
        return Err(InferenceError::InvalidHyper(
            "Fisher needs at least one draw".into(),
        ));
    }
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    batch.check(spec)?;
    let net = Mlp::from_flat(spec, weights)?;
    let mut rng = rng::stream(seed, FISHER_STREAM);
    let mut fisher = vec![0.0f64; net.params.len()];
    let mut grad = vec![0.0f64; net.params.len()];
    for m in 0..draws {
        let idx = m % batch.len();
        let x = batch.features.row(idx);
        let y = match labels {
            FisherLabels::Empirical => batch.labels[idx],
            FisherLabels::Sampled => {
                let probs = softmax(&net.logits(x));
                sample_categorical(&probs, rng.random::<f64>())
            }
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        net.accumulate_log_prob_grad(x, y, 1.0, &mut grad);
        for (f, g) in fisher.iter_mut().zip(&grad) {
            *f += g * g;
        }
    }
    let inv = 1.0 / draws as f64;
    let diag = FlatVector::new(
        weights.schema().clone(),
        fisher.iter().map(|f| (f * inv) as f32).collect(),
    )
    .expect("schema dimension");
    Ok(FisherState {
        diag,
        samples: draws,
    })
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// Accumulates `XᵀX` of every linear layer's input activations over the batch.
pub fn capture_grams(
    spec: &MlpSpec,
    weights: &FlatVector,
    batch: &Batch,
) -> Result<GramState, InferenceError> {
    batch.check(spec)?;
    let net = Mlp::from_flat(spec, weights)?;
    let mut grams: Vec<Gram> = net.layers.iter().map(|l| Gram::zeros(l.inputs)).collect();
    for x in batch.features.iter_rows() {
        let acts = net.run(x);
        for (gram, input) in grams.iter_mut().zip(&acts.inputs) {
            gram.add_outer(input);
        }
    }
    let mut state = GramState::new(batch.len());
    for (l, gram) in grams.into_iter().enumerate() {
        state.insert(MlpSpec::weight_name(l), gram);
    }
    Ok(state)
}

/// Logits of every model averaged per example, then argmax.
pub fn ensemble_logits(
    spec: &MlpSpec,
    models: &[&FlatVector],
    batch: &Batch,
) -> Result<Vec<usize>, InferenceError> {
    let logits = models
        .iter()
        .map(|m| forward(spec, m, batch))
        .collect::<Result<Vec<_>, _>>()?;
    crate::merging::ensemble_predict(&logits)
        .map_err(|e| InferenceError::InvalidBatch(format!("{e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mini-batch gradient descent on mean cross-entropy. Examples are reshuffled
/// every epoch from a stream keyed by `hyper.seed`.
pub fn train(
    spec: &MlpSpec,
    init: &FlatVector,
    data: &Batch,
    hyper: &TrainConfig,
) -> Result<FlatVector, InferenceError> {
    if hyper.batch_size == 0 {
        return Err(InferenceError::InvalidHyper(
            "batch_size must be positive".into(),
        ));
    }
    if !hyper.lr.is_finite() || hyper.lr < 0.0 {
        return Err(InferenceError::InvalidHyper(
            "lr must be finite and non-negative".into(),
        ));
    }
    if data.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    data.check(spec)?;
    let mut net = Mlp::from_flat(spec, init)?;
    let mut rng = rng::stream(hyper.seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0f64; net.params.len()];
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss -= scale
                    * net.accumulate_log_prob_grad(
                        data.features.row(i),
                        data.labels[i],
                        scale,
                        &mut grad,
                    );
            }
            if !loss.is_finite() {
                return Err(InferenceError::NonFiniteLoss { epoch, batch: b });
            }
            // grad holds ∇ mean log p; descend on the negative log-likelihood
            for (p, g) in net.params.iter_mut().zip(&grad) {
                *p += hyper.lr * g;
            }
        }
    }
    Ok(net.to_flat())
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization for weights and biases.
pub fn init_weights(spec: &MlpSpec, seed: u64) -> FlatVector {
    let schema = spec.schema();
    let mut rng = rng::stream(seed, INIT_STREAM);
    let mut values = vec![0.0f32; schema.dim()];
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let bound = 1.0 / libm::sqrt(w[0] as f64);
        for name in [MlpSpec::weight_name(l), MlpSpec::bias_name(l)] {
            let slot = schema.slot(&name).expect("schema");
            for v in &mut values[slot.range()] {
                *v = rng.random_range(-bound..bound) as f32;
            }
        }
    }
    FlatVector::new(schema, values).expect("schema dimension")
}
