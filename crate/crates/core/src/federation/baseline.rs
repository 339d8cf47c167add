use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::memory_bytes;
use super::round::weighted_accuracy;
use super::{protocol_stream, sample_available, streams, ClientCost, Experiment, Method, ProtocolConfig, RoundLedger};
use crate::error::{param, Result};
use crate::model::{evaluate, local_finetune_full, LocalOptions, ModelParams, Prox, Trainable};

/// Server and per-client state of the full-weight baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub params: ModelParams,
    /// SCAFFOLD server control variate `c`.
    pub control: Vec<f64>,
    /// SCAFFOLD client control variates `c_k` (empty until first use).
    pub client_controls: Vec<Vec<f64>>,
    /// DGC residuals withheld by each client (empty until first use).
    pub residuals: Vec<Vec<f64>>,
    pub round: usize,
}

impl GlobalState {
    pub fn init(params: ModelParams, n_clients: usize) -> Self {
        Self {
            params,
            control: Vec::new(),
            client_controls: vec![Vec::new(); n_clients],
            residuals: vec![Vec::new(); n_clients],
            round: 0,
        }
    }
}

fn or_zeros(v: &[f64], n: usize) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0; n]
    } else {
        v.to_vec()
    }
}

struct FullResult {
    /// Delta applied by the server (after DGC sparsification).
    sent: Vec<f64>,
    residual: Option<Vec<f64>>,
    control: Option<Vec<f64>>,
    control_delta: Option<Vec<f64>>,
    cost: ClientCost,
}

const SPARSE_ENTRY_BYTES: u64 = 12;

/// One round of FedAvg, FedProx, SCAFFOLD or DGC over every model weight.
pub fn run_round_baseline(
    method: Method,
    state: &GlobalState,
    exp: &Experiment,
    cfg: &ProtocolConfig,
) -> Result<(GlobalState, RoundLedger)> {
    if !method.is_full_weight() {
        return param(format!(
            "{method} is not a full-weight baseline; use the adapter round functions"
        ));
    }
    let t = state.round;
    let base = protocol_stream(cfg);
    let avail = sample_available(exp.clients.len(), cfg.availability, base.derive_path(&[streams::AVAILABILITY, t as u64]));
    let theta = state.params.flatten();
    let n = theta.len();
    let dense = 8 * n as u64;
    let control = or_zeros(&state.control, n);
    let results: Vec<FullResult> = avail
        .par_iter()
        .map(|&k| {
            let rng = base.derive_path(&[streams::CLIENT, k as u64, t as u64]);
            let mut opts = LocalOptions::sgd(cfg.local_epochs, cfg.lr, cfg.batch_size);
            let c_k = or_zeros(&state.client_controls[k], n);
            match method {
                Method::FedProx => {
                    opts.prox = Some(Prox {
                        mu: cfg.mu,
                        anchor: theta.clone(),
                    })
                }
                Method::Scaffold => opts.correction = Some(control.iter().zip(&c_k).map(|(c, ck)| c - ck).collect()),
                _ => {}
            }
            let out = local_finetune_full(state.params.clone(), &exp.clients[k].train, &opts, rng.derive(1))?;
            let after = out.state.flatten();
            let delta: Vec<f64> = after.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let (mut up, mut down) = (dense, dense);
            let mut result = FullResult {
                sent: delta,
                residual: None,
                control: None,
                control_delta: None,
                cost: ClientCost {
                    client_id: k,
                    bytes_down: 0,
                    bytes_up: 0,
                    trainable_params: n,
                    memory_bytes: memory_bytes(n, n),
                    local_loss: out.loss,
                },
            };
            match method {
                Method::Scaffold => {
                    // Control update from the averaged local gradient.
                    let scale = out.steps as f64 * cfg.lr;
                    let new_ck: Vec<f64> = if scale > 0.0 {
                        (0..n).map(|i| c_k[i] - control[i] + (theta[i] - after[i]) / scale).collect()
                    } else {
                        c_k.clone()
                    };
                    result.control_delta = Some(new_ck.iter().zip(&c_k).map(|(a, b)| a - b).collect());
                    result.control = Some(new_ck);
                    up *= 2;
                    down *= 2;
                }
                Method::Dgc => {
                    let residual = or_zeros(&state.residuals[k], n);
                    let v: Vec<f64> = result.sent.iter().zip(&residual).map(|(d, r)| d + r).collect();
                    let sent: Vec<f64> = v.iter().map(|&x| if x.abs() > cfg.tau { x } else { 0.0 }).collect();
                    let nnz = sent.iter().filter(|&&x| x != 0.0).count() as u64;
                    result.residual = Some(v.iter().zip(&sent).map(|(a, b)| a - b).collect());
                    result.sent = sent;
                    up = dense.min(SPARSE_ENTRY_BYTES * nnz);
                }
                _ => {}
            }
            result.cost.bytes_up = up;
            result.cost.bytes_down = down;
            Ok(result)
        })
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = avail
        .iter()
        .map(|&k| if cfg.weight_by_size { exp.clients[k].weight } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut step = vec![0.0; n];
    for (r, w) in results.iter().zip(&raw) {
        let w = w / total;
        step.iter_mut().zip(&r.sent).for_each(|(s, d)| *s += w * d);
    }
    let mut next = state.clone();
    next.params.add_scaled(1.0, &step);
    if method == Method::Scaffold {
        let mut c = control;
        let frac = 1.0 / exp.clients.len() as f64;
        for r in &results {
            if let Some(dc) = &r.control_delta {
                c.iter_mut().zip(dc).for_each(|(ci, d)| *ci += frac * d);
            }
        }
        next.control = c;
    }
    for (&k, r) in avail.iter().zip(&results) {
        if let Some(ck) = &r.control {
            next.client_controls[k] = ck.clone();
        }
        if let Some(res) = &r.residual {
            next.residuals[k] = res.clone();
        }
    }
    next.round = t + 1;
    let accs = global_accuracies(&next.params, exp)?;
    let ledger = RoundLedger {
        round: t,
        method,
        mean_val_acc: weighted_accuracy(&accs.iter().zip(&exp.clients).map(|(a, c)| (*a, c.val.len())).collect::<Vec<_>>()),
        mean_local_loss: results.iter().map(|r| r.cost.local_loss).sum::<f64>() / results.len() as f64,
        cluster_sizes: vec![exp.clients.len()],
        cluster_entropy: 0.0,
        clients: results.into_iter().map(|r| r.cost).collect(),
    };
    Ok((next, ledger))
}

pub(crate) fn global_accuracies(params: &ModelParams, exp: &Experiment) -> Result<Vec<f64>> {
    exp.clients
        .par_iter()
        .map(|c| Ok(evaluate(params, &[], None, &c.val)?.0))
        .collect()
}
