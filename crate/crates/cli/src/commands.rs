//! `run`, `compare`, `sweep` and `lr-grid`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fedhft_core::federation::{
    analytic_comm, build_experiment, cost_report, full_weight_ledgers, run_protocol, CostShape, Method,
};
use fedhft_core::model::write_checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::{axis_path, config_hash, with_axis, ExperimentConfig};
use crate::output::{dump_cluster_state, final_checkpoint, MetricsWriter, RunSummary, SUMMARY_SCHEMA_VERSION};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const CLUSTER_DIR: &str = "cluster_state";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker cap for client-parallel phases; `None` uses all cores.
    pub threads: Option<usize>,
    pub dump_cluster_state: bool,
}

/// Reads `FEDHFT_THREADS`; unset or empty means no cap.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("FEDHFT_THREADS") {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("FEDHFT_THREADS must be a positive integer, got {v:?}"))?;
            if n == 0 {
                bail!("FEDHFT_THREADS must be a positive integer, got 0");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// One complete run into `out`: metrics.csv, summary.json, final.ckpt and,
/// when asked, per-round cluster dumps.
///
/// If training fails mid-run the rows of the completed rounds are already
/// on disk and the error says how many there are.
pub fn execute(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let started = Instant::now();
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let hash = config_hash(cfg)?;
    let protocol = cfg.effective_protocol();
    let exp = build_experiment(&cfg.experiment, &protocol).context("building the experiment")?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)
        .with_context(|| format!("cannot write {}", metrics_path.display()))?;
    let dump_dir = out.join(CLUSTER_DIR);
    if opts.dump_cluster_state && protocol.method == Method::FedHft {
        fs::create_dir_all(&dump_dir)?;
    }
    let dump = opts.dump_cluster_state;
    let mut done = 0usize;
    let result = run_protocol(&exp, &protocol, opts.threads, &mut |ledger, clusters| {
        metrics.append(ledger)?;
        if let (true, Some(state)) = (dump, clusters) {
            dump_cluster_state(&dump_dir, ledger, state)?;
        }
        done += 1;
        Ok(())
    });
    let outcome = result.with_context(|| {
        format!(
            "run stopped after {done} completed round(s); {} holds their metrics",
            metrics_path.display()
        )
    })?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &final_checkpoint(&exp, &protocol, &outcome, &hash))?;
    let shape = CostShape::from_spec(&exp.spec);
    let baseline = full_weight_ledgers(&outcome.ledgers, shape.full_params);
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        config_hash: hash,
        config: cfg.clone(),
        rounds_executed: outcome.ledgers.len(),
        bytes_up_total: outcome.ledgers.iter().map(|l| l.bytes_up_total()).sum(),
        bytes_down_total: outcome.ledgers.iter().map(|l| l.bytes_down_total()).sum(),
        final_mean_acc: outcome.final_mean_acc,
        final_client_acc: outcome.final_client_acc.clone(),
        merged_mean_acc: outcome
            .personalized
            .as_ref()
            .map(|p| p.iter().map(|x| x.merged_acc).sum::<f64>() / p.len().max(1) as f64),
        cost_report: cost_report(&outcome.ledgers, &baseline)?,
        reference_cost: analytic_comm(&CostShape::bert_base(), protocol.rank, protocol.mask_ratio, protocol.rounds)?,
        model_shape: shape,
        effective_protocol: protocol,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

/// One line of compare.csv / sweep.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub method: Method,
    pub rounds: usize,
    pub final_mean_acc: f64,
    pub bytes_up_total: u64,
    pub bytes_down_total: u64,
    pub mean_trainable_params: f64,
    pub mean_memory_bytes: f64,
    pub comm_reduction_vs_fedavg: f64,
}

impl ResultRow {
    fn new(label: String, s: &RunSummary) -> Self {
        Self {
            label,
            method: s.effective_protocol.method,
            rounds: s.rounds_executed,
            final_mean_acc: s.final_mean_acc,
            bytes_up_total: s.bytes_up_total,
            bytes_down_total: s.bytes_down_total,
            mean_trainable_params: s.cost_report.mean_trainable_params,
            mean_memory_bytes: s.cost_report.mean_memory_bytes,
            comm_reduction_vs_fedavg: s.cost_report.comm_reduction,
        }
    }
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_table(label: &str, rows: &[ResultRow]) {
    println!(
        "{label:<24} {:>10} {:>8} {:>16} {:>16} {:>14} {:>10}",
        "method", "acc", "bytes_up", "bytes_down", "trainable", "comm_red"
    );
    for r in rows {
        println!(
            "{:<24} {:>10} {:>8.4} {:>16} {:>16} {:>14.0} {:>9.1}x",
            r.label,
            r.method.to_string(),
            r.final_mean_acc,
            r.bytes_up_total,
            r.bytes_down_total,
            r.mean_trainable_params,
            r.comm_reduction_vs_fedavg
        );
    }
}

fn run_row(cfg: &ExperimentConfig, label: String, dir: PathBuf, opts: &RunOptions) -> Result<ResultRow> {
    let summary = execute(cfg, &dir, opts).with_context(|| format!("run `{label}`"))?;
    Ok(ResultRow::new(label, &summary))
}

/// Runs every method on the same clients and seed; writes compare.csv.
pub fn cmd_compare(cfg: &ExperimentConfig, methods: &[Method], out: &Path, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    if methods.len() < 2 {
        bail!("compare needs at least two methods, got {}", methods.len());
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(methods.len());
    for (i, &m) in methods.iter().enumerate() {
        let mut point = cfg.clone();
        point.protocol.method = m;
        rows.push(run_row(&point, m.to_string(), out.join(format!("{i}-{m}")), opts)?);
    }
    write_rows(&out.join("compare.csv"), &rows)?;
    Ok(rows)
}

/// Independent runs with `axis` set to each value; writes `file_name`.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[f64],
    out: &Path,
    opts: &RunOptions,
    file_name: &str,
) -> Result<Vec<ResultRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let path = axis_path(axis)?;
    let short = path.rsplit('.').next().unwrap_or(&path).to_string();
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let point = with_axis(cfg, &path, v)?;
        rows.push(run_row(&point, format!("{path}={v}"), out.join(format!("{i}-{short}={v}")), opts)?);
    }
    write_rows(&out.join(file_name), &rows)?;
    Ok(rows)
}

pub const DEFAULT_LR_GRID: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.5, 1.0];

/// Learning-rate grid search: a sweep over `protocol.lr` that also reports
/// the best value.
pub fn cmd_lr_grid(
    cfg: &ExperimentConfig,
    values: &[f64],
    out: &Path,
    opts: &RunOptions,
) -> Result<(f64, Vec<ResultRow>)> {
    let rows = cmd_sweep(cfg, "protocol.lr", values, out, opts, "lr_grid.csv")?;
    let best = values
        .iter()
        .zip(&rows)
        .fold((values[0], f64::NEG_INFINITY), |best, (&v, r)| {
            if r.final_mean_acc > best.1 {
                (v, r.final_mean_acc)
            } else {
                best
            }
        })
        .0;
    Ok((best, rows))
}
