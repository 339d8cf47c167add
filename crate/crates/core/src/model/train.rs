use rand::seq::SliceRandom;

use super::{
    backward_parts, forward_parts, predict, softmax_cross_entropy, AdapterGrads, Batch,
    BackboneSpec, Head, ModelParams,
};
use crate::adapter::AdapterPair;
use crate::error::{param, Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Parameters optimized by local SGD, addressable as one flat vector.
pub trait Trainable: Clone + Send + Sync {
    fn flatten(&self) -> Vec<f64>;
    /// `θ ← θ + alpha · direction` over the flat layout of [`Self::flatten`].
    fn add_scaled(&mut self, alpha: f64, direction: &[f64]);

    fn num_params(&self) -> usize {
        self.flatten().len()
    }
}

fn add_slice(dst: &mut [f64], alpha: f64, src: &[f64]) -> usize {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
    dst.len()
}

/// Client-side trainable state in adapter mode: one fresh LoRA pair per
/// adapter target plus the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub pairs: Vec<AdapterPair>,
    pub head: Head,
}

impl Trainable for AdapterState {
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.pairs {
            out.extend_from_slice(p.b.data());
            out.extend_from_slice(p.a.data());
        }
        out.extend_from_slice(self.head.weights.data());
        out.extend_from_slice(&self.head.bias);
        out
    }

    fn add_scaled(&mut self, alpha: f64, dir: &[f64]) {
        let mut at = 0;
        for p in &mut self.pairs {
            at += add_slice(p.b.data_mut(), alpha, &dir[at..]);
            at += add_slice(p.a.data_mut(), alpha, &dir[at..]);
        }
        at += add_slice(self.head.weights.data_mut(), alpha, &dir[at..]);
        add_slice(&mut self.head.bias, alpha, &dir[at..]);
    }

    fn num_params(&self) -> usize {
        self.pairs.iter().map(|p| p.b.len() + p.a.len()).sum::<usize>() + self.head.num_params()
    }
}

impl Trainable for ModelParams {
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.data());
        }
        out.extend_from_slice(self.head.weights.data());
        out.extend_from_slice(&self.head.bias);
        out
    }

    fn add_scaled(&mut self, alpha: f64, dir: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            at += add_slice(l.data_mut(), alpha, &dir[at..]);
        }
        at += add_slice(self.head.weights.data_mut(), alpha, &dir[at..]);
        add_slice(&mut self.head.bias, alpha, &dir[at..]);
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum::<usize>() + self.head.num_params()
    }
}

/// Proximal anchor for the penalty `μ/2·‖θ − anchor‖²`, applied after each
/// gradient step as `θ ← (θ + lr·μ·anchor) / (1 + lr·μ)`.
#[derive(Clone, Debug)]
pub struct Prox {
    pub mu: f64,
    pub anchor: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LocalOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prox: Option<Prox>,
    /// Constant term added to every step's gradient (SCAFFOLD's `c − c_k`).
    pub correction: Option<Vec<f64>>,
}

impl LocalOptions {
    pub fn sgd(epochs: usize, lr: f64, batch_size: usize) -> Self {
        Self {
            epochs,
            lr,
            batch_size,
            prox: None,
            correction: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome<T> {
    pub state: T,
    /// Mean cross-entropy over the whole shard after training.
    pub loss: f64,
    pub steps: usize,
}

fn sgd<T: Trainable>(
    mut state: T,
    shard: &Batch,
    opts: &LocalOptions,
    rng: RngStream,
    grad: impl Fn(&T, &Batch) -> Result<(f64, Vec<f64>)>,
) -> Result<LocalOutcome<T>> {
    if shard.is_empty() {
        return param("local shard is empty");
    }
    if !(opts.lr >= 0.0) || opts.batch_size == 0 {
        return param(format!(
            "invalid SGD settings lr={} batch_size={}",
            opts.lr, opts.batch_size
        ));
    }
    let n_params = state.num_params();
    for (name, len) in [
        ("prox anchor", opts.prox.as_ref().map(|p| p.anchor.len())),
        ("correction", opts.correction.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != n_params {
                return param(format!("{name} has {len} entries, state has {n_params}"));
            }
        }
    }
    let mut r = rng.rng();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut steps = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut r);
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let mb = shard.select(chunk);
            let (loss, mut g) = grad(&state, &mb).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} at epoch {epoch}, batch {bi}; try a smaller learning rate"
                )),
                other => other,
            })?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}; try a smaller learning rate"
                )));
            }
            if let Some(c) = &opts.correction {
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += ci;
                }
            }
            state.add_scaled(-opts.lr, &g);
            if let Some(prox) = opts.prox.as_ref().filter(|p| p.mu > 0.0) {
                // Closed-form proximal step: stays stable when lr·μ is large.
                let k = opts.lr * prox.mu;
                let pull: Vec<f64> = state
                    .flatten()
                    .iter()
                    .zip(&prox.anchor)
                    .map(|(t, a)| (a - t) * k / (1.0 + k))
                    .collect();
                state.add_scaled(1.0, &pull);
            }
            steps += 1;
        }
    }
    let (loss, _) = grad(&state, shard)?;
    Ok(LocalOutcome { state, loss, steps })
}

/// Per-layer deltas `offset_l + B_l·A_l` for the adapter targets.
pub fn adapter_deltas(
    n_layers: usize,
    offsets: &[Option<Matrix>],
    pairs: &[AdapterPair],
) -> Vec<Option<Matrix>> {
    let mut deltas: Vec<Option<Matrix>> = if offsets.is_empty() {
        vec![None; n_layers]
    } else {
        offsets.to_vec()
    };
    for p in pairs {
        let prod = p.product();
        deltas[p.target] = Some(match deltas[p.target].take() {
            Some(off) => off.add(&prod),
            None => prod,
        });
    }
    deltas
}

/// Loss and flat gradient of an [`AdapterState`] on `batch`.
pub fn adapter_loss_grad(
    params: &ModelParams,
    offsets: &[Option<Matrix>],
    state: &AdapterState,
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    let deltas = adapter_deltas(params.layers.len(), offsets, &state.pairs);
    let (_, cache) = forward_parts(&params.layers, &state.head, &deltas, batch)?;
    let g = backward_parts(&params.layers, &state.head, &deltas, &cache, batch)?;
    let mut flat = Vec::with_capacity(state.num_params());
    for p in &state.pairs {
        let ag = AdapterGrads::from_dense(&g.layers[p.target], p);
        flat.extend_from_slice(ag.d_b.data());
        flat.extend_from_slice(ag.d_a.data());
    }
    flat.extend_from_slice(g.head.weights.data());
    flat.extend_from_slice(&g.head.bias);
    Ok((g.loss, flat))
}

fn full_loss_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let (_, cache) = forward_parts(&params.layers, &params.head, &[], batch)?;
    let g = backward_parts(&params.layers, &params.head, &[], &cache, batch)?;
    let mut flat = Vec::with_capacity(params.num_params());
    for l in &g.layers {
        flat.extend_from_slice(l.data());
    }
    flat.extend_from_slice(g.head.weights.data());
    flat.extend_from_slice(&g.head.bias);
    Ok((g.loss, flat))
}

/// Local SGD on adapter factors and head with the backbone frozen.
///
/// `offsets` holds fixed per-layer deltas (the merged mixture the client
/// starts from); only `state` is updated.
pub fn local_finetune(
    params: &ModelParams,
    offsets: &[Option<Matrix>],
    state: AdapterState,
    shard: &Batch,
    opts: &LocalOptions,
    rng: RngStream,
) -> Result<LocalOutcome<AdapterState>> {
    sgd(state, shard, opts, rng, |s, b| adapter_loss_grad(params, offsets, s, b))
}

/// Local SGD on every weight (used by the full fine-tuning baselines).
pub fn local_finetune_full(
    params: ModelParams,
    shard: &Batch,
    opts: &LocalOptions,
    rng: RngStream,
) -> Result<LocalOutcome<ModelParams>> {
    sgd(params, shard, opts, rng, full_loss_grad)
}

/// Trains a randomly initialized backbone and head on `pool`.
pub fn pretrain_backbone(
    spec: &BackboneSpec,
    pool: &Batch,
    epochs: usize,
    lr: f64,
    rng: RngStream,
) -> Result<ModelParams> {
    let init = ModelParams::init(spec, rng.derive(0))?;
    if epochs == 0 {
        return Ok(init);
    }
    let opts = LocalOptions::sgd(epochs, lr, 32);
    let out = local_finetune_full(init, pool, &opts, rng.derive(1)).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("pretraining diverged ({msg})")),
        other => other,
    })?;
    Ok(out.state)
}

/// `(accuracy, mean loss)` of a model with optional deltas and head override.
pub fn evaluate(
    params: &ModelParams,
    deltas: &[Option<Matrix>],
    head: Option<&Head>,
    batch: &Batch,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Ok((0.0, 0.0));
    }
    let head = head.unwrap_or(&params.head);
    let (logits, _) = forward_parts(&params.layers, head, deltas, batch)?;
    let (_, loss) = softmax_cross_entropy(&logits, &batch.labels);
    let pred = predict(&logits);
    let correct = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok((correct as f64 / batch.len() as f64, loss))
}
