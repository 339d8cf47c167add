//! Round orchestration for the clustered adapter protocol and the
//! baselines it is compared against, plus byte and memory accounting.
//!
//! Every client draws randomness from its own stream derived from
//! `(seed, client, round)`, and all server reductions run in ascending
//! client-id order, so results do not depend on the worker count.

mod baseline;
mod cost;
mod round;
mod runner;

pub use baseline::{run_round_baseline, GlobalState};
pub use cost::{analytic_comm, cost_report, full_weight_ledgers, AnalyticComm, ClientCost, CostReport, CostShape, RoundLedger};
pub use round::{
    client_view, personalize_final, run_round_fedhft, run_round_fedlora, ClusterState, LoraState,
    Personalized,
};
pub use runner::{build_experiment, run_protocol, Experiment, ExperimentSpec, FinalState, RunOutcome};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, reconstruct, AdapterPair, MaskedUpdate};
use crate::clustering::AssignmentMatrix;
use crate::error::{param, Error, Result};
use crate::model::{Batch, Head};
use crate::numerics::{svd_truncate, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedHft,
    FedAvg,
    FedProx,
    Scaffold,
    Dgc,
    FedLora,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedHft,
        Method::FedAvg,
        Method::FedProx,
        Method::Scaffold,
        Method::Dgc,
        Method::FedLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedHft => "fedhft",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::Scaffold => "scaffold",
            Method::Dgc => "dgc",
            Method::FedLora => "fedlora",
        }
    }

    /// Methods that fine-tune every backbone weight.
    pub fn is_full_weight(self) -> bool {
        matches!(self, Method::FedAvg | Method::FedProx | Method::Scaffold | Method::Dgc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Parameter(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub method: Method,
    /// K.
    pub clients: usize,
    /// T.
    pub rounds: usize,
    /// T_w.
    pub warmup: usize,
    /// E.
    pub local_epochs: usize,
    /// C.
    pub clusters: usize,
    pub mask_ratio: f64,
    /// Server adapter rank r (capped per layer at `min(d_out, d_in)`).
    pub rank: usize,
    /// Client rank budgets assigned round-robin; empty means every client
    /// uses the server rank.
    pub rank_mix: Vec<usize>,
    /// Standard deviation of fresh `A` factors.
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// FedProx proximal weight.
    pub mu: f64,
    /// DGC magnitude threshold.
    pub tau: f64,
    /// Fraction r_a of clients available per round.
    pub availability: f64,
    pub seed: u64,
    /// Aggregate with raw `p_kc` instead of normalized `q_k·p_kc` weights.
    pub raw_eq7: bool,
    /// Multiply assignment scores by the data fraction `q_k`.
    pub weight_by_size: bool,
    /// Run the final local fine-tune (clustered method only).
    pub personalize: bool,
    pub pca_dim: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            method: Method::FedHft,
            clients: 50,
            rounds: 20,
            warmup: 5,
            local_epochs: 2,
            clusters: 3,
            mask_ratio: 0.5,
            rank: 32,
            rank_mix: Vec::new(),
            sigma: 0.02,
            lr: 0.2,
            batch_size: 32,
            mu: 0.01,
            tau: 1e-3,
            availability: 1.0,
            seed: 0,
            raw_eq7: false,
            weight_by_size: true,
            personalize: true,
            pca_dim: 16,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, String); 11] = [
            (self.clients >= 1, "clients must be at least 1".into()),
            (self.warmup <= self.rounds, format!("warmup ({}) exceeds rounds ({})", self.warmup, self.rounds)),
            (self.clusters >= 1, "clusters must be at least 1".into()),
            ((0.0..1.0).contains(&self.mask_ratio), format!("mask_ratio {} outside [0, 1)", self.mask_ratio)),
            (self.rank >= 1, "rank must be at least 1".into()),
            (
                self.rank_mix.iter().all(|&r| (1..=self.rank).contains(&r)),
                format!("rank_mix entries must lie in 1..={}", self.rank),
            ),
            (self.sigma >= 0.0 && self.sigma.is_finite(), "sigma must be finite and non-negative".into()),
            (self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and non-negative".into()),
            (self.batch_size >= 1, "batch_size must be at least 1".into()),
            (self.mu >= 0.0 && self.tau >= 0.0, "mu and tau must be non-negative".into()),
            (
                self.availability > 0.0 && self.availability <= 1.0,
                format!("availability {} outside (0, 1]", self.availability),
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return param(msg);
            }
        }
        if self.pca_dim == 0 {
            return param("pca_dim must be at least 1");
        }
        Ok(())
    }

    /// Rounds (and warmup) stretched by `1/r_a` so every client takes part
    /// in about as many rounds as with full availability.
    pub fn scaled_for_availability(&self) -> ProtocolConfig {
        let scale = |n: usize| ((n as f64 / self.availability) - 1e-9).ceil() as usize;
        ProtocolConfig {
            rounds: scale(self.rounds),
            warmup: scale(self.warmup),
            ..self.clone()
        }
    }

    /// Rank budget r_k of client `k`.
    pub fn client_rank(&self, k: usize) -> usize {
        if self.rank_mix.is_empty() {
            self.rank
        } else {
            self.rank_mix[k % self.rank_mix.len()]
        }
    }
}

/// One client's data and fixed simulation attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub group: usize,
    pub train: Batch,
    pub val: Batch,
    pub rank_budget: usize,
    /// q_k = N_k / Σ N_k'.
    pub weight: f64,
}

/// Uniformly samples `ceil(r_a·K)` distinct clients, returned ascending.
pub fn sample_available(n_clients: usize, availability: f64, rng: RngStream) -> Vec<usize> {
    let m = ((availability * n_clients as f64 - 1e-9).ceil() as usize).clamp(1, n_clients);
    if m == n_clients {
        return (0..n_clients).collect();
    }
    let mut picked = sample(&mut rng.rng(), n_clients, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Per-participant aggregation weights for cluster `c`.
///
/// The default is `q_k·p_kc` normalized over the participants; `raw_eq7`
/// returns `p_kc` unchanged. All-zero weights mean the cluster is skipped.
pub fn aggregation_weights(
    p: &AssignmentMatrix,
    c: usize,
    participants: &[usize],
    sizes: &[f64],
    cfg: &ProtocolConfig,
) -> Vec<f64> {
    if cfg.raw_eq7 {
        return participants.iter().map(|&k| p.get(k, c)).collect();
    }
    let raw: Vec<f64> = participants
        .iter()
        .map(|&k| p.get(k, c) * if cfg.weight_by_size { sizes[k] } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|w| w / total).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// `svd_truncate(B_c A_c + Σ_k w_k ΔW_k, rank)`.
///
/// Returns the cluster unchanged when no update carries weight, and zero
/// `B` with a fresh `A` when the sum vanishes.
pub fn aggregate_cluster(
    current: &AdapterPair,
    updates: &[&MaskedUpdate],
    weights: &[f64],
    rank: usize,
    sigma: f64,
    rng: RngStream,
) -> Result<AdapterPair> {
    if updates.len() != weights.len() {
        return param(format!("{} updates but {} weights", updates.len(), weights.len()));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(current.clone());
    }
    let (d_out, d_in) = (current.d_out(), current.d_in());
    let mut m = current.product();
    for (u, &w) in updates.iter().zip(weights) {
        if u.target != current.target || u.d_out != d_out || u.d_in() != d_in {
            return param(format!(
                "update for target {} ({}×{}) does not fit cluster target {} ({d_out}×{d_in})",
                u.target,
                u.d_out,
                u.d_in(),
                current.target
            ));
        }
        if w != 0.0 {
            m.axpy(w, &reconstruct(u, d_out)?);
        }
    }
    if m.max_abs() == 0.0 {
        return init_adapter(d_out, d_in, rank, sigma, current.target, rng);
    }
    let (b, a) = svd_truncate(&m, rank)?;
    AdapterPair::new(b, a, current.target)
}

/// `head_c + Σ_k w_k δ_k`.
pub fn aggregate_heads(head: &Head, deltas: &[&Head], weights: &[f64]) -> Result<Head> {
    if deltas.len() != weights.len() {
        return param(format!("{} head deltas but {} weights", deltas.len(), weights.len()));
    }
    let mut out = head.clone();
    for (d, &w) in deltas.iter().zip(weights) {
        if d.weights.shape() != head.weights.shape() || d.bias.len() != head.bias.len() {
            return param("head delta shape mismatch");
        }
        if w != 0.0 {
            out.axpy(w, d);
        }
    }
    Ok(out)
}

/// Stream tags for the protocol's random draws.
pub(crate) mod streams {
    pub const PROTOCOL: u64 = 0x5052_4f54;
    pub const AVAILABILITY: u64 = 1;
    pub const CLIENT: u64 = 2;
    pub const AGGREGATE: u64 = 3;
    pub const CLUSTERING: u64 = 4;
    pub const PERSONALIZE: u64 = 5;
    pub const INIT: u64 = 6;
}

pub(crate) fn protocol_stream(cfg: &ProtocolConfig) -> RngStream {
    RngStream::new(cfg.seed, streams::PROTOCOL)
}
