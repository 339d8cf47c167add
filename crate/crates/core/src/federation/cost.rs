use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::adapter::{kept_count, masked_update_bytes};
use crate::error::{contract, Result};
use crate::model::BackboneSpec;

/// One participant's accounting for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCost {
    pub client_id: usize,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub trainable_params: usize,
    /// `8·(total + 2·trainable)`: f64 weights plus a gradient and an update
    /// buffer for every trainable parameter.
    pub memory_bytes: u64,
    pub local_loss: f64,
}

pub(crate) fn memory_bytes(total_params: usize, trainable: usize) -> u64 {
    8 * (total_params + 2 * trainable) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: usize,
    pub method: Method,
    pub clients: Vec<ClientCost>,
    /// Sample-weighted mean held-out accuracy over all clients after the round.
    pub mean_val_acc: f64,
    pub mean_local_loss: f64,
    /// Argmax cluster sizes over all clients (one entry for global methods).
    pub cluster_sizes: Vec<usize>,
    pub cluster_entropy: f64,
}

impl RoundLedger {
    pub fn bytes_up_total(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes_up).sum()
    }

    pub fn bytes_down_total(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes_down).sum()
    }
}

/// Totals of one run and their ratios against a baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub baseline: Method,
    pub rounds: usize,
    pub clients: usize,
    pub bytes_down_per_client: f64,
    pub bytes_up_per_client: f64,
    pub mean_trainable_params: f64,
    pub mean_memory_bytes: f64,
    /// Baseline total bytes over this run's total bytes.
    pub comm_reduction: f64,
    pub memory_reduction: f64,
    pub trainable_reduction: f64,
}

struct Totals {
    clients: usize,
    down: f64,
    up: f64,
    trainable: f64,
    memory: f64,
}

fn totals(ledgers: &[RoundLedger]) -> Totals {
    let ids: BTreeSet<usize> = ledgers.iter().flat_map(|l| l.clients.iter().map(|c| c.client_id)).collect();
    let entries = ledgers.iter().map(|l| l.clients.len()).sum::<usize>().max(1) as f64;
    let all = || ledgers.iter().flat_map(|l| &l.clients);
    let n = ids.len().max(1) as f64;
    Totals {
        clients: ids.len(),
        down: all().map(|c| c.bytes_down as f64).sum::<f64>() / n,
        up: all().map(|c| c.bytes_up as f64).sum::<f64>() / n,
        trainable: all().map(|c| c.trainable_params as f64).sum::<f64>() / entries,
        memory: all().map(|c| c.memory_bytes as f64).sum::<f64>() / entries,
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Summarizes `run` and compares it with `baseline` (typically FedAvg).
pub fn cost_report(run: &[RoundLedger], baseline: &[RoundLedger]) -> Result<CostReport> {
    if run.len() != baseline.len() {
        return contract(format!(
            "cost comparison needs equal round counts, got {} and {}",
            run.len(),
            baseline.len()
        ));
    }
    let (Some(first), Some(base_first)) = (run.first(), baseline.first()) else {
        return contract("cost report needs at least one round");
    };
    let t = totals(run);
    let b = totals(baseline);
    Ok(CostReport {
        method: first.method,
        baseline: base_first.method,
        rounds: run.len(),
        clients: t.clients,
        bytes_down_per_client: t.down,
        bytes_up_per_client: t.up,
        mean_trainable_params: t.trainable,
        mean_memory_bytes: t.memory,
        comm_reduction: ratio(b.down + b.up, t.down + t.up),
        memory_reduction: ratio(b.memory, t.memory),
        trainable_reduction: ratio(b.trainable, t.trainable),
    })
}

/// Prices the participants of `run` as if they had exchanged all
/// `total_params` weights each way under FedAvg. Accuracy and loss fields
/// are zero; only the accounting is meaningful.
pub fn full_weight_ledgers(run: &[RoundLedger], total_params: usize) -> Vec<RoundLedger> {
    let dense = 8 * total_params as u64;
    run.iter()
        .map(|l| RoundLedger {
            round: l.round,
            method: Method::FedAvg,
            clients: l
                .clients
                .iter()
                .map(|c| ClientCost {
                    client_id: c.client_id,
                    bytes_down: dense,
                    bytes_up: dense,
                    trainable_params: total_params,
                    memory_bytes: memory_bytes(total_params, total_params),
                    local_loss: 0.0,
                })
                .collect(),
            mean_val_acc: 0.0,
            mean_local_loss: 0.0,
            cluster_sizes: vec![l.clients.len()],
            cluster_entropy: 0.0,
        })
        .collect()
}

/// Dimensions needed to price one client round without training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostShape {
    /// Every parameter a full-weight method sends, head included.
    pub full_params: usize,
    /// `(d_out, d_in)` of each adapter target.
    pub targets: Vec<(usize, usize)>,
    pub head_elems: usize,
}

impl CostShape {
    pub fn from_spec(spec: &BackboneSpec) -> Self {
        Self {
            full_params: spec.total_params(),
            targets: spec.adapter_targets.iter().map(|&l| spec.layer_shape(l)).collect(),
            head_elems: spec.head_params(),
        }
    }

    /// 12-layer, 768-wide encoder with query and value projections as
    /// adapter targets and a two-class head.
    pub fn bert_base() -> Self {
        const BACKBONE: usize = 109_482_240;
        let head = 768 * 2 + 2;
        Self {
            full_params: BACKBONE + head,
            targets: vec![(768, 768); 24],
            head_elems: head,
        }
    }
}

/// Analytic per-client bytes over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticComm {
    pub rounds: usize,
    pub full_bytes_per_client: u64,
    pub adapter_up_per_client: u64,
    pub adapter_down_per_client: u64,
    pub reduction: f64,
}

/// Full-weight exchange (8 bytes per parameter each way) against masked
/// adapter uploads plus merged-mixture downloads, both over `rounds`.
pub fn analytic_comm(shape: &CostShape, rank: usize, mask_ratio: f64, rounds: usize) -> Result<AnalyticComm> {
    let mut up = 0;
    let mut down = 0;
    for (i, &(d_out, d_in)) in shape.targets.iter().enumerate() {
        let r = rank.min(d_out).min(d_in);
        let head = if i == 0 { shape.head_elems } else { 0 };
        up += masked_update_bytes(kept_count(d_out, mask_ratio)?, r, d_in, head);
        down += masked_update_bytes(d_out, r, d_in, head);
    }
    let rounds64 = rounds as u64;
    let full = 2 * 8 * shape.full_params as u64 * rounds64;
    Ok(AnalyticComm {
        rounds,
        full_bytes_per_client: full,
        adapter_up_per_client: up * rounds64,
        adapter_down_per_client: down * rounds64,
        reduction: ratio(full as f64, ((up + down) * rounds64) as f64),
    })
}
