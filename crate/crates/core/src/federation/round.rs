use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::memory_bytes;
use super::{
    aggregate_cluster, aggregate_heads, aggregation_weights, protocol_stream, sample_available, streams,
    ClientCost, Experiment, ProtocolConfig, RoundLedger,
};
use crate::adapter::{init_adapter, mask_update, masked_update_bytes, measure_bytes, merge_mixture, AdapterPair, MaskedUpdate};
use crate::clustering::{update_assignments, AssignmentMatrix, ClusterConfig, EmOptions, GmmParams};
use crate::error::Result;
use crate::model::{adapter_deltas, evaluate, local_finetune, AdapterState, BackboneSpec, Head, LocalOptions, Trainable};
use crate::numerics::{svd_truncate, Matrix, RngStream};

/// Server state of the clustered protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    /// `adapters[c][i]` is cluster `c`'s pair for the `i`-th adapter target.
    pub adapters: Vec<Vec<AdapterPair>>,
    pub heads: Vec<Head>,
    pub p: AssignmentMatrix,
    pub gmm: Option<GmmParams>,
    pub pca_explained_variance: Option<Vec<f64>>,
    pub round: usize,
}

pub(crate) fn target_ranks(spec: &BackboneSpec, rank: usize) -> Vec<usize> {
    spec.adapter_targets.iter().map(|&l| spec.effective_rank(l, rank)).collect()
}

fn fresh_pairs(spec: &BackboneSpec, ranks: &[usize], sigma: f64, rng: RngStream) -> Result<Vec<AdapterPair>> {
    spec.adapter_targets
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(i, (&l, &r))| {
            let (o, d) = spec.layer_shape(l);
            init_adapter(o, d, r, sigma, l, rng.derive(i as u64))
        })
        .collect()
}

impl ClusterState {
    /// `C` banks with `B = 0`, `A ~ N(0, σ²)`, every head set to `head`
    /// and uniform assignments.
    pub fn init(spec: &BackboneSpec, head: &Head, cfg: &ProtocolConfig) -> Result<Self> {
        let ranks = target_ranks(spec, cfg.rank);
        let base = protocol_stream(cfg);
        let adapters = (0..cfg.clusters)
            .map(|c| fresh_pairs(spec, &ranks, cfg.sigma, base.derive_path(&[streams::INIT, c as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adapters,
            heads: vec![head.clone(); cfg.clusters],
            p: AssignmentMatrix::uniform(cfg.clients, cfg.clusters),
            gmm: None,
            pca_explained_variance: None,
            round: 0,
        })
    }
}

/// What a client receives: its mixture re-factored at the server rank,
/// the layer offsets that payload encodes, and the merged head.
#[derive(Clone, Debug)]
pub struct ClientView {
    pub offsets: Vec<Option<Matrix>>,
    pub head: Head,
    pub payload: Vec<MaskedUpdate>,
}

impl ClientView {
    pub fn bytes(&self) -> u64 {
        self.payload.iter().map(measure_bytes).sum()
    }
}

/// Merges `Σ_c p_kc B_c A_c` per target and `Σ_c p_kc head_c` for client `k`.
pub fn client_view(state: &ClusterState, k: usize, spec: &BackboneSpec) -> Result<ClientView> {
    let p = state.p.row(k);
    let head = Head::weighted_sum(&state.heads, p);
    let mut offsets = vec![None; spec.n_layers];
    let mut payload = Vec::with_capacity(spec.adapter_targets.len());
    for i in 0..spec.adapter_targets.len() {
        let banks: Vec<&AdapterPair> = state.adapters.iter().map(|c| &c[i]).collect();
        let target = banks[0].target;
        let rank = banks[0].rank();
        let merged = merge_mixture(&banks, p)?;
        let (b, a) = if merged.max_abs() == 0.0 {
            (Matrix::zeros(merged.rows(), rank), banks[0].a.clone())
        } else {
            svd_truncate(&merged, rank)?
        };
        offsets[target] = Some(b.matmul(&a));
        payload.push(MaskedUpdate {
            client_id: k as u32,
            target,
            d_out: b.rows(),
            kept_rows: (0..b.rows()).collect(),
            b_kept: b,
            a,
            head: (i == 0).then(|| head.clone()),
        });
    }
    Ok(ClientView { offsets, head, payload })
}

/// Truncates `pair` to `rank` through its product when the budget is smaller.
fn fit_rank(pair: AdapterPair, rank: usize) -> Result<AdapterPair> {
    if rank >= pair.rank() {
        return Ok(pair);
    }
    let prod = pair.product();
    if prod.max_abs() == 0.0 {
        let a = pair.a.select_rows(&(0..rank).collect::<Vec<_>>());
        return AdapterPair::new(Matrix::zeros(pair.d_out(), rank), a, pair.target);
    }
    let (b, a) = svd_truncate(&prod, rank)?;
    AdapterPair::new(b, a, pair.target)
}

struct ClientResult {
    client_id: usize,
    updates: Vec<MaskedUpdate>,
    head_after: Head,
    head_delta: Head,
    cost: ClientCost,
}

/// Local training shared by the clustered and plain adapter protocols:
/// fresh pairs on top of `offsets`, then rank fitting to the client budget.
fn train_client(
    exp: &Experiment,
    cfg: &ProtocolConfig,
    k: usize,
    round: usize,
    offsets: &[Option<Matrix>],
    head: &Head,
) -> Result<(Vec<AdapterPair>, Head, f64, usize)> {
    let shard = &exp.clients[k];
    let ranks = target_ranks(&exp.spec, cfg.rank);
    let rng = protocol_stream(cfg).derive_path(&[streams::CLIENT, k as u64, round as u64]);
    let state = AdapterState {
        pairs: fresh_pairs(&exp.spec, &ranks, cfg.sigma, rng.derive(0))?,
        head: head.clone(),
    };
    let opts = LocalOptions::sgd(cfg.local_epochs, cfg.lr, cfg.batch_size);
    let out = local_finetune(&exp.backbone, offsets, state, &shard.train, &opts, rng.derive(1))?;
    let trainable = out.state.num_params();
    let pairs = out
        .state
        .pairs
        .into_iter()
        .map(|p| fit_rank(p, shard.rank_budget))
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, out.state.head, out.loss, trainable))
}

fn fedhft_client(state: &ClusterState, exp: &Experiment, cfg: &ProtocolConfig, k: usize, round: usize) -> Result<ClientResult> {
    let view = client_view(state, k, &exp.spec)?;
    let (pairs, head_after, loss, trainable) = train_client(exp, cfg, k, round, &view.offsets, &view.head)?;
    let head_delta = head_after.sub(&view.head);
    let updates = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| mask_update(p, (i == 0).then(|| head_delta.clone()), cfg.mask_ratio, k as u32))
        .collect::<Result<Vec<_>>>()?;
    let cost = ClientCost {
        client_id: k,
        bytes_down: view.bytes(),
        bytes_up: updates.iter().map(measure_bytes).sum(),
        trainable_params: trainable,
        memory_bytes: memory_bytes(exp.spec.total_params(), trainable),
        local_loss: loss,
    };
    Ok(ClientResult {
        client_id: k,
        updates,
        head_after,
        head_delta,
        cost,
    })
}

pub(crate) fn weighted_accuracy(accs: &[(f64, usize)]) -> f64 {
    let n: usize = accs.iter().map(|a| a.1).sum();
    if n == 0 {
        return 0.0;
    }
    accs.iter().map(|(a, m)| a * *m as f64).sum::<f64>() / n as f64
}

/// Held-out accuracy of every client's merged model, in client order.
pub(crate) fn clustered_accuracies(state: &ClusterState, exp: &Experiment) -> Result<Vec<f64>> {
    (0..exp.clients.len())
        .into_par_iter()
        .map(|k| {
            let view = client_view(state, k, &exp.spec)?;
            Ok(evaluate(&exp.backbone, &view.offsets, Some(&view.head), &exp.clients[k].val)?.0)
        })
        .collect()
}

fn cluster_sizes(p: &AssignmentMatrix) -> Vec<usize> {
    let mut sizes = vec![0; p.n_clusters()];
    for c in p.argmax() {
        sizes[c] += 1;
    }
    sizes
}

/// One round of the clustered protocol: merge, local fine-tune, mask,
/// per-cluster aggregation, then the assignment update.
pub fn run_round_fedhft(
    state: &ClusterState,
    exp: &Experiment,
    cfg: &ProtocolConfig,
) -> Result<(ClusterState, RoundLedger)> {
    let t = state.round;
    let base = protocol_stream(cfg);
    let avail = sample_available(exp.clients.len(), cfg.availability, base.derive_path(&[streams::AVAILABILITY, t as u64]));
    let results: Vec<ClientResult> = avail
        .par_iter()
        .map(|&k| fedhft_client(state, exp, cfg, k, t))
        .collect::<Result<_>>()?;
    let sizes: Vec<f64> = exp.clients.iter().map(|c| c.weight).collect();
    let ranks = target_ranks(&exp.spec, cfg.rank);
    let mut next = state.clone();
    for c in 0..state.adapters.len() {
        let w = aggregation_weights(&state.p, c, &avail, &sizes, cfg);
        for (i, &rank) in ranks.iter().enumerate() {
            let ups: Vec<&MaskedUpdate> = results.iter().map(|r| &r.updates[i]).collect();
            let rng = base.derive_path(&[streams::AGGREGATE, t as u64, c as u64, i as u64]);
            next.adapters[c][i] = aggregate_cluster(&state.adapters[c][i], &ups, &w, rank, cfg.sigma, rng)?;
        }
        let deltas: Vec<&Head> = results.iter().map(|r| &r.head_delta).collect();
        next.heads[c] = aggregate_heads(&state.heads[c], &deltas, &w)?;
    }
    let head_updates: Vec<(usize, Matrix)> = results.iter().map(|r| (r.client_id, r.head_after.weights.clone())).collect();
    let start_heads: Vec<Matrix> = state.heads.iter().map(|h| h.weights.clone()).collect();
    let ccfg = ClusterConfig {
        n_clusters: state.adapters.len(),
        warmup: cfg.warmup,
        pca_dim: cfg.pca_dim,
        em: EmOptions::default(),
    };
    let upd = update_assignments(&state.p, t, &head_updates, &start_heads, &ccfg, base.derive_path(&[streams::CLUSTERING, t as u64]))?;
    next.p = upd.p;
    if upd.gmm.is_some() {
        next.gmm = upd.gmm;
        next.pca_explained_variance = upd.pca.map(|m| m.explained_variance);
    }
    next.round = t + 1;
    let accs = clustered_accuracies(&next, exp)?;
    let ledger = RoundLedger {
        round: t,
        method: cfg.method,
        mean_val_acc: weighted_accuracy(&accs.iter().zip(&exp.clients).map(|(a, c)| (*a, c.val.len())).collect::<Vec<_>>()),
        mean_local_loss: results.iter().map(|r| r.cost.local_loss).sum::<f64>() / results.len() as f64,
        cluster_sizes: cluster_sizes(&next.p),
        cluster_entropy: next.p.entropy(),
        clients: results.into_iter().map(|r| r.cost).collect(),
    };
    Ok((next, ledger))
}

/// Single global adapter bank trained by plain federated averaging of the
/// client products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraState {
    pub pairs: Vec<AdapterPair>,
    pub head: Head,
    pub round: usize,
}

impl LoraState {
    pub fn init(spec: &BackboneSpec, head: &Head, cfg: &ProtocolConfig) -> Result<Self> {
        let ranks = target_ranks(spec, cfg.rank);
        let rng = protocol_stream(cfg).derive_path(&[streams::INIT, 0]);
        Ok(Self {
            pairs: fresh_pairs(spec, &ranks, cfg.sigma, rng)?,
            head: head.clone(),
            round: 0,
        })
    }

    pub(crate) fn offsets(&self, n_layers: usize) -> Vec<Option<Matrix>> {
        adapter_deltas(n_layers, &[], &self.pairs)
    }

    fn payload_bytes(&self, head_elems: usize) -> u64 {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| masked_update_bytes(p.d_out(), p.rank(), p.d_in(), if i == 0 { head_elems } else { 0 }))
            .sum()
    }
}

/// One round of plain federated adapters: dense product uploads,
/// data-weighted averaging, re-factoring at the server rank.
pub fn run_round_fedlora(state: &LoraState, exp: &Experiment, cfg: &ProtocolConfig) -> Result<(LoraState, RoundLedger)> {
    let t = state.round;
    let base = protocol_stream(cfg);
    let avail = sample_available(exp.clients.len(), cfg.availability, base.derive_path(&[streams::AVAILABILITY, t as u64]));
    let offsets = state.offsets(exp.spec.n_layers);
    let head_elems = exp.spec.head_params();
    let results: Vec<(Vec<Matrix>, Head, ClientCost)> = avail
        .par_iter()
        .map(|&k| {
            let (pairs, head_after, loss, trainable) = train_client(exp, cfg, k, t, &offsets, &state.head)?;
            let up = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| masked_update_bytes(p.d_out(), p.rank(), p.d_in(), if i == 0 { head_elems } else { 0 }))
                .sum();
            let cost = ClientCost {
                client_id: k,
                bytes_down: state.payload_bytes(head_elems),
                bytes_up: up,
                trainable_params: trainable,
                memory_bytes: memory_bytes(exp.spec.total_params(), trainable),
                local_loss: loss,
            };
            Ok((pairs.iter().map(AdapterPair::product).collect(), head_after.sub(&state.head), cost))
        })
        .collect::<Result<_>>()?;
    let w: Vec<f64> = if cfg.raw_eq7 {
        vec![1.0; avail.len()]
    } else {
        let raw: Vec<f64> = avail
            .iter()
            .map(|&k| if cfg.weight_by_size { exp.clients[k].weight } else { 1.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    };
    let mut next = state.clone();
    for (i, pair) in state.pairs.iter().enumerate() {
        let mut m = pair.product();
        for (r, &wk) in results.iter().zip(&w) {
            m.axpy(wk, &r.0[i]);
        }
        next.pairs[i] = if m.max_abs() == 0.0 {
            let rng = base.derive_path(&[streams::AGGREGATE, t as u64, 0, i as u64]);
            init_adapter(pair.d_out(), pair.d_in(), pair.rank(), cfg.sigma, pair.target, rng)?
        } else {
            let (b, a) = svd_truncate(&m, pair.rank())?;
            AdapterPair::new(b, a, pair.target)?
        };
    }
    for (r, &wk) in results.iter().zip(&w) {
        next.head.axpy(wk, &r.1);
    }
    next.round = t + 1;
    let accs = lora_accuracies(&next, exp)?;
    let ledger = RoundLedger {
        round: t,
        method: cfg.method,
        mean_val_acc: weighted_accuracy(&accs.iter().zip(&exp.clients).map(|(a, c)| (*a, c.val.len())).collect::<Vec<_>>()),
        mean_local_loss: results.iter().map(|r| r.2.local_loss).sum::<f64>() / results.len() as f64,
        cluster_sizes: vec![exp.clients.len()],
        cluster_entropy: 0.0,
        clients: results.into_iter().map(|r| r.2).collect(),
    };
    Ok((next, ledger))
}

pub(crate) fn lora_accuracies(state: &LoraState, exp: &Experiment) -> Result<Vec<f64>> {
    let offsets = state.offsets(exp.spec.n_layers);
    exp.clients
        .par_iter()
        .map(|c| Ok(evaluate(&exp.backbone, &offsets, Some(&state.head), &c.val)?.0))
        .collect()
}

/// Final per-client metrics after the personalization fine-tune.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Personalized {
    pub client_id: usize,
    /// Accuracy of the merged mixture before fine-tuning.
    pub merged_acc: f64,
    pub acc: f64,
    pub loss: f64,
}

/// Runs `E` local epochs from the client's merged mixture and evaluates on
/// its held-out split. With `E = 0` the merged model is evaluated as is.
pub fn personalize_final(state: &ClusterState, exp: &Experiment, cfg: &ProtocolConfig, k: usize) -> Result<Personalized> {
    let client = &exp.clients[k];
    let view = client_view(state, k, &exp.spec)?;
    let (merged_acc, merged_loss) = evaluate(&exp.backbone, &view.offsets, Some(&view.head), &client.val)?;
    if cfg.local_epochs == 0 {
        return Ok(Personalized {
            client_id: k,
            merged_acc,
            acc: merged_acc,
            loss: merged_loss,
        });
    }
    let ranks = target_ranks(&exp.spec, cfg.rank);
    let rng = protocol_stream(cfg).derive_path(&[streams::PERSONALIZE, k as u64]);
    let init = AdapterState {
        pairs: fresh_pairs(&exp.spec, &ranks, cfg.sigma, rng.derive(0))?,
        head: view.head.clone(),
    };
    let opts = LocalOptions::sgd(cfg.local_epochs, cfg.lr, cfg.batch_size);
    let out = local_finetune(&exp.backbone, &view.offsets, init, &client.train, &opts, rng.derive(1))?;
    let deltas = adapter_deltas(exp.spec.n_layers, &view.offsets, &out.state.pairs);
    let (acc, loss) = evaluate(&exp.backbone, &deltas, Some(&out.state.head), &client.val)?;
    Ok(Personalized {
        client_id: k,
        merged_acc,
        acc,
        loss,
    })
}
