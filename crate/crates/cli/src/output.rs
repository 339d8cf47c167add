//! Files a run leaves behind.
//!
//! `metrics.csv` (schema version [`METRICS_SCHEMA_VERSION`]) has one row per
//! completed round and is flushed after every row:
//!
//! | column | meaning |
//! |---|---|
//! | `schema_version` | layout version of this file |
//! | `round` | 0-based round index |
//! | `method` | protocol name |
//! | `mean_val_acc` | sample-weighted held-out accuracy over all clients |
//! | `mean_local_loss` | mean final local training loss of the participants |
//! | `bytes_up_total` / `bytes_down_total` | summed over the participants |
//! | `cluster_entropy` | mean row entropy of the assignment scores, nats |

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use fedhft_core::federation::{
    AnalyticComm, ClusterState, CostReport, CostShape, Experiment, FinalState, ProtocolConfig, RoundLedger,
    RunOutcome,
};
use fedhft_core::model::Checkpoint;
use fedhft_core::{AdapterPair, Head, Matrix, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const METRICS_COLUMNS: [&str; 8] = [
    "schema_version",
    "round",
    "method",
    "mean_val_acc",
    "mean_local_loss",
    "bytes_up_total",
    "bytes_down_total",
    "cluster_entropy",
];

pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(METRICS_COLUMNS)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, l: &RoundLedger) -> io::Result<()> {
        self.out.write_record([
            METRICS_SCHEMA_VERSION.to_string(),
            l.round.to_string(),
            l.method.to_string(),
            l.mean_val_acc.to_string(),
            l.mean_local_loss.to_string(),
            l.bytes_up_total().to_string(),
            l.bytes_down_total().to_string(),
            l.cluster_entropy.to_string(),
        ])?;
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

#[derive(Serialize)]
struct ClusterDump<'a> {
    round: usize,
    cluster_sizes: &'a [usize],
    /// Row `k` is client `k`'s assignment scores.
    p: Vec<&'a [f64]>,
    gmm: Option<&'a fedhft_core::clustering::GmmParams>,
    pca_explained_variance: Option<&'a [f64]>,
}

/// Writes `dir/round_NNNN.json` with the assignment matrix and mixture
/// fitted at the end of the ledger's round.
pub fn dump_cluster_state(dir: &Path, ledger: &RoundLedger, state: &ClusterState) -> io::Result<()> {
    let p = state.p.matrix();
    let dump = ClusterDump {
        round: ledger.round,
        cluster_sizes: &ledger.cluster_sizes,
        p: (0..p.rows()).map(|k| p.row(k)).collect(),
        gmm: state.gmm.as_ref(),
        pca_explained_variance: state.pca_explained_variance.as_deref(),
    };
    let mut f = File::create(dir.join(format!("round_{:04}.json", ledger.round)))?;
    serde_json::to_writer_pretty(&mut f, &dump)?;
    f.write_all(b"\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Protocol after availability scaling; this is what ran.
    pub effective_protocol: ProtocolConfig,
    pub rounds_executed: usize,
    /// Summed over all rounds and participants.
    pub bytes_up_total: u64,
    pub bytes_down_total: u64,
    pub final_mean_acc: f64,
    pub final_client_acc: Vec<f64>,
    /// Mean accuracy of the merged mixtures before personalization.
    pub merged_mean_acc: Option<f64>,
    pub model_shape: CostShape,
    /// This run against FedAvg priced at the same participation.
    pub cost_report: CostReport,
    /// The same adapter settings priced at a 12-layer, 768-wide encoder.
    pub reference_cost: AnalyticComm,
    pub wall_clock_secs: f64,
}

fn pair_tensors(out: &mut Vec<(String, Matrix)>, prefix: &str, pair: &AdapterPair) {
    out.push((format!("{prefix}.target{}.b", pair.target), pair.b.clone()));
    out.push((format!("{prefix}.target{}.a", pair.target), pair.a.clone()));
}

fn head_tensors(out: &mut Vec<(String, Matrix)>, prefix: &str, head: &Head) {
    out.push((format!("{prefix}.head.weights"), head.weights.clone()));
    let bias = Matrix::new(1, head.bias.len(), head.bias.clone()).expect("bias is a row");
    out.push((format!("{prefix}.head.bias"), bias));
}

fn model_tensors(out: &mut Vec<(String, Matrix)>, prefix: &str, params: &ModelParams) {
    for (l, w) in params.layers.iter().enumerate() {
        out.push((format!("{prefix}.layer{l}"), w.clone()));
    }
    head_tensors(out, prefix, &params.head);
}

/// Packs the pretrained backbone and the method's final trained state.
///
/// Tensor names: `backbone.layer{l}`, `backbone.head.{weights,bias}`, then
/// for fedhft `assignments` (K × C) and `cluster{c}.target{l}.{b,a}` /
/// `cluster{c}.head.*`; for fedlora `lora.target{l}.{b,a}` / `lora.head.*`;
/// for full-weight methods `global.layer{l}` / `global.head.*`.
pub fn final_checkpoint(exp: &Experiment, cfg: &ProtocolConfig, outcome: &RunOutcome, hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let spec = &exp.spec;
    let targets: Vec<String> = spec.adapter_targets.iter().map(|t| t.to_string()).collect();
    for (k, v) in [
        ("format_version", CHECKPOINT_FORMAT_VERSION.to_string()),
        ("method", cfg.method.to_string()),
        ("rounds", outcome.ledgers.len().to_string()),
        ("seed", cfg.seed.to_string()),
        ("config_hash", hash.to_string()),
        ("d_in", spec.d_in.to_string()),
        ("d_hidden", spec.d_hidden.to_string()),
        ("n_layers", spec.n_layers.to_string()),
        ("n_classes", spec.n_classes.to_string()),
        ("adapter_targets", targets.join(",")),
        ("final_mean_acc", outcome.final_mean_acc.to_string()),
    ] {
        ck.meta.insert(k.to_string(), v);
    }
    let t = &mut ck.tensors;
    model_tensors(t, "backbone", &exp.backbone);
    match &outcome.final_state {
        FinalState::Clustered(s) => {
            t.push(("assignments".into(), s.p.matrix().clone()));
            for (c, (pairs, head)) in s.adapters.iter().zip(&s.heads).enumerate() {
                let prefix = format!("cluster{c}");
                pairs.iter().for_each(|p| pair_tensors(t, &prefix, p));
                head_tensors(t, &prefix, head);
            }
        }
        FinalState::Lora(s) => {
            s.pairs.iter().for_each(|p| pair_tensors(t, "lora", p));
            head_tensors(t, "lora", &s.head);
        }
        FinalState::Global(s) => model_tensors(t, "global", &s.params),
    }
    ck
}
