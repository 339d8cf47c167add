//! Command-line experiment runner: config files, single runs, method
//! comparisons, parameter sweeps and the files they write.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_compare, cmd_lr_grid, cmd_sweep, execute, threads_from_env, ResultRow, RunOptions};
pub use config::{config_hash, sweepable_axes, with_axis, ExperimentConfig};
pub use output::{RunSummary, METRICS_COLUMNS, METRICS_SCHEMA_VERSION};
