//! Deterministic inputs shared by the benchmarks.

use fedhft_core::adapter::{mask_update, AdapterPair, MaskedUpdate};
use fedhft_core::data::PlantedTask;
use fedhft_core::federation::{build_experiment, ClusterState, Experiment, ExperimentSpec, ProtocolConfig};
use fedhft_core::{Matrix, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0).rng();
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_pair(d_out: usize, d_in: usize, rank: usize, seed: u64) -> AdapterPair {
    AdapterPair::new(random_matrix(d_out, rank, seed), random_matrix(rank, d_in, seed ^ 0x5eed), 0)
        .expect("rank fits both sides")
}

/// One cluster bank plus `n` masked client uploads and normalized weights.
pub struct AggregationCase {
    pub current: AdapterPair,
    pub updates: Vec<MaskedUpdate>,
    pub weights: Vec<f64>,
    pub rank: usize,
}

impl AggregationCase {
    pub fn new(d: usize, rank: usize, n: usize, mask_ratio: f64, seed: u64) -> Self {
        let current = random_pair(d, d, rank, seed);
        let updates = (0..n)
            .map(|k| {
                let p = random_pair(d, d, rank, seed + 1 + k as u64);
                mask_update(&p, None, mask_ratio, k as u32).expect("valid mask ratio")
            })
            .collect();
        let mut rng = RngStream::new(seed, 1).rng();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            current,
            updates,
            weights: raw.iter().map(|w| w / total).collect(),
            rank,
        }
    }

    pub fn update_refs(&self) -> Vec<&MaskedUpdate> {
        self.updates.iter().collect()
    }
}

/// A pretrained population of `clients` with its initial cluster state,
/// small enough to time a single clustered round.
pub fn round_fixture(clients: usize, seed: u64) -> (Experiment, ProtocolConfig, ClusterState) {
    let cfg = ProtocolConfig {
        clients,
        rounds: 1,
        warmup: 0,
        seed,
        ..ProtocolConfig::default()
    };
    let spec = ExperimentSpec {
        task: PlantedTask { samples_per_client: 50, ..PlantedTask::default() },
        pretrain_epochs: 5,
        pretrain_samples: 500,
        ..ExperimentSpec::default()
    };
    let exp = build_experiment(&spec, &cfg).expect("valid fixture spec");
    let state = ClusterState::init(&exp.spec, &exp.backbone.head, &cfg).expect("valid fixture config");
    (exp, cfg, state)
}
