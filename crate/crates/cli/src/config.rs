//! Experiment configuration files.
//!
//! A config is TOML with up to four tables; anything omitted takes its
//! default, so an empty file is a complete default run.
//!
//! ```toml
//! [protocol]
//! method = "fedhft"
//! clients = 50
//!
//! [experiment]
//! alpha = 5.0
//!
//! [experiment.task]
//! group_sep = 6.0
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedhft_core::data::TaskSpec;
use fedhft_core::federation::{ExperimentSpec, ProtocolConfig};
use fedhft_core::RngStream;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Optional sweep declared in the file; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub experiment: ExperimentSpec,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate().context("in [protocol]")?;
        if self.experiment.csv.is_none() {
            TaskSpec::planted(&self.experiment.task, RngStream::new(0, 0)).context("in [experiment.task]")?;
        }
        if !(self.experiment.alpha > 0.0) {
            bail!("in [experiment]: alpha must be positive, got {}", self.experiment.alpha);
        }
        if !(self.experiment.holdout > 0.0 && self.experiment.holdout < 1.0) {
            bail!("in [experiment]: holdout must lie in (0, 1), got {}", self.experiment.holdout);
        }
        if let Some(axis) = &self.sweep.axis {
            axis_path(axis).context("in [sweep]")?;
        }
        Ok(())
    }

    /// Protocol actually executed: rounds and warmup stretched by `1/r_a`.
    pub fn effective_protocol(&self) -> ProtocolConfig {
        self.protocol.scaled_for_availability()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// SHA-256 of the canonical JSON (object keys sorted) of the protocol and
/// experiment tables, so configs that differ only in field order,
/// formatting or output location hash equal.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let semantic = serde_json::json!({ "protocol": cfg.protocol, "experiment": cfg.experiment });
    let canonical = serde_json::to_vec(&semantic)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Every numeric leaf of the config that a sweep may vary, as
/// dotted paths such as `protocol.mask_ratio`.
pub fn sweepable_axes() -> Vec<String> {
    let value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    collect_numeric(&value, String::new(), &mut out);
    out
}

fn collect_numeric(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_numeric(child, path, out);
            }
        }
        Value::Number(_) => out.push(prefix),
        _ => {}
    }
}

/// Resolves `axis` to a full path. Bare field names are accepted when they
/// name exactly one sweepable field.
pub fn axis_path(axis: &str) -> Result<String> {
    let axes = sweepable_axes();
    if axes.iter().any(|a| a == axis) {
        return Ok(axis.to_string());
    }
    let suffix = format!(".{axis}");
    let matches: Vec<&String> = axes.iter().filter(|a| a.ends_with(&suffix)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => bail!("unknown sweep axis `{axis}`; valid axes: {}", axes.join(", ")),
        many => bail!(
            "sweep axis `{axis}` is ambiguous: {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Returns a copy of `cfg` with the field at `axis` set to `value`.
/// Integer fields reject fractional values.
pub fn with_axis(cfg: &ExperimentConfig, axis: &str, value: f64) -> Result<ExperimentConfig> {
    let path = axis_path(axis)?;
    let mut root = serde_json::to_value(cfg)?;
    let mut slot = &mut root;
    for key in path.split('.') {
        slot = slot
            .get_mut(key)
            .with_context(|| format!("config has no field `{path}`"))?;
    }
    let is_integer = slot.as_f64().is_some_and(|_| slot.is_u64() || slot.is_i64());
    *slot = if is_integer {
        if value.fract() != 0.0 || value < 0.0 {
            bail!("`{path}` takes a non-negative integer, got {value}");
        }
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    let next: ExperimentConfig = serde_json::from_value(root).with_context(|| format!("setting `{path}` = {value}"))?;
    next.validate()?;
    Ok(next)
}
