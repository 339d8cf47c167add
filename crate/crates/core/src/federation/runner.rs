use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::global_accuracies;
use super::round::{clustered_accuracies, lora_accuracies, weighted_accuracy};
use super::{
    personalize_final, run_round_baseline, run_round_fedhft, run_round_fedlora, ClientShard, ClusterState, GlobalState,
    LoraState, Method, Personalized, ProtocolConfig, RoundLedger,
};
use crate::data::{federate, gen_task, load_csv, Dataset, PlantedTask, TaskSpec};
use crate::error::{param, Error, Result};
use crate::model::{pretrain_backbone, BackboneSpec, Batch, ModelParams, Nonlinearity};
use crate::numerics::RngStream;

const DATA_STREAM: u64 = 0x4441_5441;

/// Everything about the simulated population that is not a protocol knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: PlantedTask,
    /// Dirichlet label-skew concentration α.
    pub alpha: f64,
    pub holdout: f64,
    pub d_hidden: usize,
    pub n_layers: usize,
    /// Layers carrying adapters; empty means all of them.
    pub adapter_targets: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Size of the pretraining pool (rows set aside when reading a CSV).
    pub pretrain_samples: usize,
    /// Read the pooled data from this CSV instead of generating it.
    pub csv: Option<PathBuf>,
    pub label_column: String,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: PlantedTask::default(),
            alpha: 5.0,
            holdout: 0.2,
            d_hidden: 32,
            n_layers: 2,
            adapter_targets: Vec::new(),
            pretrain_epochs: 20,
            pretrain_lr: 0.05,
            pretrain_samples: 2000,
            csv: None,
            label_column: "label".into(),
        }
    }
}

/// A pretrained backbone and the clients that fine-tune it.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub spec: BackboneSpec,
    pub backbone: ModelParams,
    pub clients: Vec<ClientShard>,
}

fn pooled_data(spec: &ExperimentSpec, k: usize, rng: RngStream) -> Result<(Dataset, Batch)> {
    if let Some(path) = &spec.csv {
        let data = load_csv(path, &spec.label_column)?;
        let mut idx: Vec<usize> = (0..data.batch.len()).collect();
        idx.shuffle(&mut rng.derive(0).rng());
        let n_pool = spec.pretrain_samples.min(idx.len() / 2);
        let (pool, rest) = idx.split_at(n_pool);
        let batch = data.batch.select(rest);
        let n = batch.len();
        return Ok((
            Dataset {
                batch,
                groups: vec![0; n],
                n_classes: data.n_classes,
            },
            data.batch.select(pool),
        ));
    }
    let task = TaskSpec::planted(&spec.task, rng.derive(0))?;
    let groups = task.n_groups();
    let per_group = k.div_ceil(groups) * task.samples_per_client;
    let data = gen_task(&task, per_group, rng.derive(1))?;
    let generic = TaskSpec {
        group_shift: None,
        label_rotation: false,
        ..task
    };
    let pool = gen_task(&generic, spec.pretrain_samples, rng.derive(2))?.batch;
    Ok((data, pool))
}

/// Generates (or loads) the data, pretrains the backbone and shards the
/// population. Depends only on `spec`, `cfg.clients`, `cfg.rank_mix` and
/// `cfg.seed`, so every method sees the same clients.
pub fn build_experiment(spec: &ExperimentSpec, cfg: &ProtocolConfig) -> Result<Experiment> {
    cfg.validate()?;
    let rng = RngStream::new(cfg.seed, DATA_STREAM);
    let (data, pool) = pooled_data(spec, cfg.clients, rng)?;
    let d_in = data.batch.features.cols();
    let bspec = BackboneSpec {
        d_in,
        d_hidden: spec.d_hidden,
        n_layers: spec.n_layers,
        n_classes: data.n_classes,
        nonlinearity: Nonlinearity::Tanh,
        adapter_targets: if spec.adapter_targets.is_empty() {
            (0..spec.n_layers).collect()
        } else {
            spec.adapter_targets.clone()
        },
    };
    bspec.validate()?;
    let parts = federate(&data, cfg.clients, spec.alpha, spec.holdout, rng.derive(3))?;
    let backbone = pretrain_backbone(&bspec, &pool, spec.pretrain_epochs, spec.pretrain_lr, rng.derive(4))?;
    let total: usize = parts.iter().map(|c| c.train.len()).sum();
    let clients = parts
        .into_iter()
        .map(|c| ClientShard {
            client_id: c.client_id,
            group: c.group,
            weight: c.train.len() as f64 / total as f64,
            rank_budget: cfg.client_rank(c.client_id),
            train: c.train,
            val: c.val,
        })
        .collect();
    Ok(Experiment {
        spec: bspec,
        backbone,
        clients,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FinalState {
    Clustered(ClusterState),
    Lora(LoraState),
    Global(GlobalState),
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub ledgers: Vec<RoundLedger>,
    pub final_state: FinalState,
    /// Held-out accuracy per client at the end (after personalization
    /// when it ran).
    pub final_client_acc: Vec<f64>,
    /// Sample-weighted mean of `final_client_acc`.
    pub final_mean_acc: f64,
    pub personalized: Option<Vec<Personalized>>,
}

/// Runs `cfg.rounds` rounds of `cfg.method`, calling `on_round` after each
/// with the round's ledger and, for fedhft, the updated cluster state.
///
/// `threads` caps the worker pool for client-parallel phases; results are
/// identical for any value.
pub fn run_protocol(
    exp: &Experiment,
    cfg: &ProtocolConfig,
    threads: Option<usize>,
    on_round: &mut (dyn FnMut(&RoundLedger, Option<&ClusterState>) -> Result<()> + Send),
) -> Result<RunOutcome> {
    cfg.validate()?;
    if exp.clients.len() != cfg.clients {
        return param(format!(
            "experiment has {} clients but the protocol expects {}",
            exp.clients.len(),
            cfg.clients
        ));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_inner(exp, cfg, on_round))
}

fn run_inner(
    exp: &Experiment,
    cfg: &ProtocolConfig,
    on_round: &mut (dyn FnMut(&RoundLedger, Option<&ClusterState>) -> Result<()> + Send),
) -> Result<RunOutcome> {
    let mut ledgers = Vec::with_capacity(cfg.rounds);
    let mut record = |ledger: RoundLedger, clusters: Option<&ClusterState>| -> Result<()> {
        on_round(&ledger, clusters)?;
        ledgers.push(ledger);
        Ok(())
    };
    let (final_state, accs, personalized) = match cfg.method {
        Method::FedHft => {
            let mut state = ClusterState::init(&exp.spec, &exp.backbone.head, cfg)?;
            for _ in 0..cfg.rounds {
                let (next, ledger) = run_round_fedhft(&state, exp, cfg)?;
                state = next;
                record(ledger, Some(&state))?;
            }
            if cfg.personalize {
                let pers: Vec<Personalized> = (0..exp.clients.len())
                    .into_par_iter()
                    .map(|k| personalize_final(&state, exp, cfg, k))
                    .collect::<Result<_>>()?;
                let accs = pers.iter().map(|p| p.acc).collect();
                (FinalState::Clustered(state), accs, Some(pers))
            } else {
                let accs = clustered_accuracies(&state, exp)?;
                (FinalState::Clustered(state), accs, None)
            }
        }
        Method::FedLora => {
            let mut state = LoraState::init(&exp.spec, &exp.backbone.head, cfg)?;
            for _ in 0..cfg.rounds {
                let (next, ledger) = run_round_fedlora(&state, exp, cfg)?;
                state = next;
                record(ledger, None)?;
            }
            let accs = lora_accuracies(&state, exp)?;
            (FinalState::Lora(state), accs, None)
        }
        method => {
            let mut state = GlobalState::init(exp.backbone.clone(), exp.clients.len());
            for _ in 0..cfg.rounds {
                let (next, ledger) = run_round_baseline(method, &state, exp, cfg)?;
                state = next;
                record(ledger, None)?;
            }
            let accs = global_accuracies(&state.params, exp)?;
            (FinalState::Global(state), accs, None)
        }
    };
    let weighted: Vec<(f64, usize)> = accs.iter().zip(&exp.clients).map(|(a, c)| (*a, c.val.len())).collect();
    Ok(RunOutcome {
        ledgers,
        final_state,
        final_mean_acc: weighted_accuracy(&weighted),
        final_client_acc: accs,
        personalized,
    })
}
