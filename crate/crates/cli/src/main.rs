use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fedhft_cli::commands::{cmd_compare, cmd_lr_grid, cmd_sweep, execute, print_table, DEFAULT_LR_GRID};
use fedhft_cli::{threads_from_env, ExperimentConfig, RunOptions};
use fedhft_core::federation::Method;

#[derive(Parser)]
#[command(name = "fedhft", version, about = "Clustered federated fine-tuning with masked low-rank adapters")]
struct Cli {
    /// Override `protocol.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Aggregate with raw assignment scores instead of normalized weights.
    #[arg(long, global = true)]
    raw_eq7: bool,
    /// Write the assignment matrix and mixture after every round.
    #[arg(long, global = true)]
    dump_cluster_state: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One run: metrics.csv, summary.json and final.ckpt.
    Run { config: PathBuf },
    /// Several methods on the same clients: compare.csv.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
    },
    /// One run per value of a numeric config field: sweep.csv.
    Sweep {
        config: PathBuf,
        /// Dotted field path such as `protocol.mask_ratio`, or a unique
        /// bare field name.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Grid search over the local learning rate: lr_grid.csv.
    LrGrid {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Print the fully defaulted config.
    Defaults,
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.protocol.seed = seed;
    }
    if cli.raw_eq7 {
        cfg.protocol.raw_eq7 = true;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let opts = || -> Result<RunOptions> {
        Ok(RunOptions {
            threads: threads_from_env()?,
            dump_cluster_state: cli.dump_cluster_state,
        })
    };
    match &cli.command {
        Command::Defaults => print!("{}", ExperimentConfig::default().to_toml()?),
        Command::Run { config } => {
            let cfg = load(&cli, config)?;
            let s = execute(&cfg, &cfg.output.dir, &opts()?)?;
            println!(
                "{}: {} rounds, final mean accuracy {:.4}, communication reduction vs fedavg {:.2}x ({:.2}s)",
                s.effective_protocol.method,
                s.rounds_executed,
                s.final_mean_acc,
                s.cost_report.comm_reduction,
                s.wall_clock_secs
            );
        }
        Command::Compare { config, methods } => {
            let cfg = load(&cli, config)?;
            let rows = cmd_compare(&cfg, methods, &cfg.output.dir, &opts()?)?;
            print_table("run", &rows);
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load(&cli, config)?;
            let axis = axis
                .clone()
                .or_else(|| cfg.sweep.axis.clone())
                .ok_or_else(|| anyhow::anyhow!("sweep needs --axis or [sweep] axis in the config"))?;
            let values = if values.is_empty() { cfg.sweep.values.clone() } else { values.clone() };
            let rows = cmd_sweep(&cfg, &axis, &values, &cfg.output.dir, &opts()?, "sweep.csv")?;
            print_table("point", &rows);
        }
        Command::LrGrid { config, values } => {
            let cfg = load(&cli, config)?;
            let values = if values.is_empty() { DEFAULT_LR_GRID.to_vec() } else { values.clone() };
            let (best, rows) = cmd_lr_grid(&cfg, &values, &cfg.output.dir, &opts()?)?;
            print_table("point", &rows);
            println!("best lr: {best}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
