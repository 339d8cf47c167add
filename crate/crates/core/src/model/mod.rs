//! Frozen tanh backbone with LoRA-injectable layers and a trainable
//! linear classifier head.
//!
//! Layer 0 maps `d_in → d_hidden`; the remaining `n_layers − 1` layers map
//! `d_hidden → d_hidden`. Logits are `head · h_L + bias`. Gradients are
//! analytic; [`backward`] returns `dL/dW` for every layer so both the LoRA
//! path (via [`AdapterGrads`]) and full fine-tuning baselines share it.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{
    adapter_deltas, adapter_loss_grad, evaluate, local_finetune, local_finetune_full, pretrain_backbone, AdapterState, LocalOptions,
    LocalOutcome, Prox, Trainable,
};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterPair;
use crate::error::{contract, param, Error, Result};
use crate::numerics::{Matrix, RngStream};
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    pub adapter_targets: Vec<usize>,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.n_layers == 0 || self.n_classes < 2 {
            return param(format!("degenerate backbone dims {self:?}"));
        }
        if let Some(&t) = self.adapter_targets.iter().find(|&&t| t >= self.n_layers) {
            return param(format!("adapter target {t} >= n_layers {}", self.n_layers));
        }
        let mut sorted = self.adapter_targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.adapter_targets.len() {
            return param("adapter targets must be distinct");
        }
        Ok(())
    }

    /// `(d_out, d_in)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            (self.d_hidden, self.d_in)
        } else {
            (self.d_hidden, self.d_hidden)
        }
    }

    pub fn backbone_params(&self) -> usize {
        (0..self.n_layers)
            .map(|l| {
                let (o, i) = self.layer_shape(l);
                o * i
            })
            .sum()
    }

    pub fn head_params(&self) -> usize {
        self.n_classes * self.d_hidden + self.n_classes
    }

    pub fn total_params(&self) -> usize {
        self.backbone_params() + self.head_params()
    }

    /// Rank actually used at layer `l` for a requested rank.
    pub fn effective_rank(&self, l: usize, requested: usize) -> usize {
        let (o, i) = self.layer_shape(l);
        requested.min(o).min(i).max(1)
    }
}

/// Linear classifier on the last hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// `n_classes × d_hidden`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn zeros(n_classes: usize, d_hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(n_classes, d_hidden),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn axpy(&mut self, alpha: f64, other: &Head) {
        self.weights.axpy(alpha, &other.weights);
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Head) -> Head {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `Σ_c w_c · heads[c]`.
    pub fn weighted_sum(heads: &[Head], weights: &[f64]) -> Head {
        let mut out = Head::zeros(heads[0].weights.rows(), heads[0].weights.cols());
        for (h, &w) in heads.iter().zip(weights) {
            if w != 0.0 {
                out.axpy(w, h);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Matrix>,
    pub head: Head,
}

impl ModelParams {
    /// Gaussian initialization with variance `1/fan_in`.
    pub fn init(spec: &BackboneSpec, rng: RngStream) -> Result<Self> {
        spec.validate()?;
        let mut r = rng.rng();
        let mut layers = Vec::with_capacity(spec.n_layers);
        for l in 0..spec.n_layers {
            let (o, i) = spec.layer_shape(l);
            let dist = Normal::new(0.0, (1.0 / i as f64).sqrt()).expect("valid std");
            layers.push(Matrix::from_fn(o, i, |_, _| dist.sample(&mut r)));
        }
        let dist = Normal::new(0.0, (1.0 / spec.d_hidden as f64).sqrt()).expect("valid std");
        let head = Head {
            weights: Matrix::from_fn(spec.n_classes, spec.d_hidden, |_, _| dist.sample(&mut r)),
            bias: vec![0.0; spec.n_classes],
        };
        Ok(Self { layers, head })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    /// `b × d_in`.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return param(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates batches with equal feature width.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let cols = parts.first().map_or(0, |b| b.features.cols());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.features.cols() != cols {
                return param("feature width mismatch in concat");
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        Batch::new(Matrix::new(labels.len(), cols, data)?, labels)
    }
}

/// Per-layer additive weight deltas; `None` leaves the layer untouched.
pub type LayerDeltas = [Option<Matrix>];

/// Activations retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `hidden[0]` is the input; `hidden[l + 1] = tanh(hidden[l] · W_lᵀ)`.
    hidden: Vec<Matrix>,
    effective: Vec<Matrix>,
    stamp: u64,
}

fn stamp(batch: &Batch, deltas: &LayerDeltas) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    mix(batch.len() as u64);
    batch.features.data().iter().for_each(|v| mix(v.to_bits()));
    batch.labels.iter().for_each(|&l| mix(l as u64));
    for d in deltas {
        match d {
            Some(m) => m.data().iter().for_each(|v| mix(v.to_bits())),
            None => mix(0x5a5a),
        }
    }
    h
}

fn check_deltas(layers: &[Matrix], deltas: &LayerDeltas) -> Result<()> {
    if !deltas.is_empty() && deltas.len() != layers.len() {
        return param(format!("{} deltas for {} layers", deltas.len(), layers.len()));
    }
    for (l, d) in deltas.iter().enumerate() {
        if let Some(m) = d {
            if m.shape() != layers[l].shape() {
                return param(format!(
                    "delta for layer {l} has shape {:?}, expected {:?}",
                    m.shape(),
                    layers[l].shape()
                ));
            }
        }
    }
    Ok(())
}

/// Computes logits for `batch` under `W_l + ΔW_l`.
pub fn forward(
    params: &ModelParams,
    deltas: &LayerDeltas,
    batch: &Batch,
) -> Result<(Matrix, ForwardCache)> {
    forward_parts(&params.layers, &params.head, deltas, batch)
}

pub(crate) fn forward_parts(
    layers: &[Matrix],
    head: &Head,
    deltas: &LayerDeltas,
    batch: &Batch,
) -> Result<(Matrix, ForwardCache)> {
    check_deltas(layers, deltas)?;
    if batch.features.cols() != layers[0].cols() {
        return param(format!(
            "batch has {} features, model expects {}",
            batch.features.cols(),
            layers[0].cols()
        ));
    }
    let n_classes = head.weights.rows();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= n_classes) {
        return param(format!("label {bad} >= n_classes {n_classes}"));
    }
    let mut hidden = Vec::with_capacity(layers.len() + 1);
    let mut effective = Vec::with_capacity(layers.len());
    hidden.push(batch.features.clone());
    for (l, w) in layers.iter().enumerate() {
        let w_eff = match deltas.get(l) {
            Some(Some(d)) => w.add(d),
            _ => w.clone(),
        };
        let mut z = hidden[l].matmul_t(&w_eff);
        z.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        hidden.push(z);
        effective.push(w_eff);
    }
    let logits = head_logits(hidden.last().expect("at least one layer"), head);
    let stamp = stamp(batch, deltas);
    Ok((
        logits,
        ForwardCache {
            hidden,
            effective,
            stamp,
        },
    ))
}

fn head_logits(last: &Matrix, head: &Head) -> Matrix {
    let mut z = last.matmul_t(&head.weights);
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&head.bias) {
            *v += b;
        }
    }
    z
}

/// Row-wise softmax probabilities and mean cross-entropy.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (Matrix, f64) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let log_z = m + s.ln();
        loss += log_z - logits.get(i, labels[i]);
        row.iter_mut().for_each(|v| *v /= s);
    }
    (probs, loss / labels.len().max(1) as f64)
}

/// Mean cross-entropy of `batch`.
pub fn loss(params: &ModelParams, deltas: &LayerDeltas, batch: &Batch) -> Result<f64> {
    let (logits, _) = forward(params, deltas, batch)?;
    Ok(softmax_cross_entropy(&logits, &batch.labels).1)
}

/// Dense gradients of the mean cross-entropy.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// `dL/dW_l` (equivalently `dL/dΔW_l`) for every layer.
    pub layers: Vec<Matrix>,
    pub head: Head,
}

pub fn backward(
    params: &ModelParams,
    deltas: &LayerDeltas,
    cache: &ForwardCache,
    batch: &Batch,
) -> Result<Gradients> {
    backward_parts(&params.layers, &params.head, deltas, cache, batch)
}

pub(crate) fn backward_parts(
    layers: &[Matrix],
    head: &Head,
    deltas: &LayerDeltas,
    cache: &ForwardCache,
    batch: &Batch,
) -> Result<Gradients> {
    if cache.stamp != stamp(batch, deltas) || cache.effective.len() != layers.len() {
        return contract("forward cache does not match this batch and delta set");
    }
    let last = cache.hidden.last().expect("hidden states");
    let logits = head_logits(last, head);
    let (mut dlogits, loss) = softmax_cross_entropy(&logits, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss in backward".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = dlogits.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    let head_w = dlogits.t_matmul(last);
    let head_b: Vec<f64> = (0..dlogits.cols()).map(|j| dlogits.column(j).iter().sum()).collect();
    let mut d_hidden = dlogits.matmul(&head.weights);
    let mut grads = vec![Matrix::zeros(0, 0); layers.len()];
    for l in (0..layers.len()).rev() {
        let out = &cache.hidden[l + 1];
        let mut dz = d_hidden;
        for (g, h) in dz.data_mut().iter_mut().zip(out.data()) {
            *g *= 1.0 - h * h;
        }
        grads[l] = dz.t_matmul(&cache.hidden[l]);
        if l > 0 {
            d_hidden = dz.matmul(&cache.effective[l]);
        } else {
            d_hidden = Matrix::zeros(0, 0);
        }
    }
    Ok(Gradients {
        loss,
        layers: grads,
        head: Head {
            weights: head_w,
            bias: head_b,
        },
    })
}

/// LoRA factor gradients from the dense layer gradient:
/// `dB = G·Aᵀ`, `dA = Bᵀ·G`.
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    pub d_b: Matrix,
    pub d_a: Matrix,
}

impl AdapterGrads {
    pub fn from_dense(dense: &Matrix, pair: &AdapterPair) -> Self {
        Self {
            d_b: dense.matmul_t(&pair.a),
            d_a: pair.b.t_matmul(dense),
        }
    }
}

/// Index of the largest logit per row.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
