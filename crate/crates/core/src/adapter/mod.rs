//! LoRA adapter algebra: initialization, mixture merging, update-energy
//! importance, row masking and reconstruction.

mod wire;

pub use wire::{decode_update, encode_update, masked_update_bytes, HEADER_BYTES, UPDATE_MAGIC};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, param, Error, Result};
use crate::model::Head;
use crate::numerics::{Matrix, RngStream};

/// Low-rank factor pair with `ΔW = B·A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    /// `d_out × r`.
    pub b: Matrix,
    /// `r × d_in`.
    pub a: Matrix,
    /// Backbone layer this pair adapts.
    pub target: usize,
}

impl AdapterPair {
    pub fn new(b: Matrix, a: Matrix, target: usize) -> Result<Self> {
        if b.cols() != a.rows() {
            return param(format!(
                "factor shapes {:?} and {:?} do not chain",
                b.shape(),
                a.shape()
            ));
        }
        let r = b.cols();
        if r == 0 || r > b.rows().min(a.cols()) {
            return param(format!(
                "rank {r} outside [1, {}]",
                b.rows().min(a.cols())
            ));
        }
        Ok(Self { b, a, target })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

/// `B = 0`, `A ~ N(0, σ²)` i.i.d.
pub fn init_adapter(
    d_out: usize,
    d_in: usize,
    rank: usize,
    sigma: f64,
    target: usize,
    rng: RngStream,
) -> Result<AdapterPair> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return param(format!("init sigma must be positive, got {sigma}"));
    }
    if rank == 0 || rank > d_out.min(d_in) {
        return param(format!("rank {rank} outside [1, {}]", d_out.min(d_in)));
    }
    let dist = Normal::new(0.0, sigma).expect("validated sigma");
    let mut r = rng.rng();
    let a = Matrix::from_fn(rank, d_in, |_, _| dist.sample(&mut r));
    AdapterPair::new(Matrix::zeros(d_out, rank), a, target)
}

/// Checks a soft assignment row: entries in `[0, 1]` summing to one.
pub fn check_assignment_row(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return contract(format!("assignment row has entries outside [0,1]: {p:?}"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return contract(format!("assignment row sums to {total}, not 1"));
    }
    Ok(())
}

/// `ΔW = Σ_c p_c · B_c A_c` over one adapter target.
pub fn merge_mixture(clusters: &[&AdapterPair], p: &[f64]) -> Result<Matrix> {
    if clusters.is_empty() || clusters.len() != p.len() {
        return param(format!(
            "{} cluster adapters but {} assignment weights",
            clusters.len(),
            p.len()
        ));
    }
    check_assignment_row(p)?;
    let shape = (clusters[0].d_out(), clusters[0].d_in());
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (pair, &w) in clusters.iter().zip(p) {
        if (pair.d_out(), pair.d_in()) != shape {
            return param("cluster adapters disagree on shape");
        }
        if w != 0.0 {
            out.axpy(w, &pair.product());
        }
    }
    Ok(out)
}

/// Non-negative per-output-row importance scores for one adapter target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub target: usize,
}

/// Scores the output dimensions of an adapter update.
pub trait ImportanceScorer {
    fn score(&self, pair: &AdapterPair) -> Result<ImportanceVector>;
}

/// Squared row norms of `B·A`, the empirical-Fisher surrogate.
#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateEnergy;

impl ImportanceScorer for UpdateEnergy {
    fn score(&self, pair: &AdapterPair) -> Result<ImportanceVector> {
        fisher_importance(pair)
    }
}

/// `scores[d] = Σ_{d'} ⟨B[d,:], A[:,d']⟩²`.
pub fn fisher_importance(pair: &AdapterPair) -> Result<ImportanceVector> {
    let prod = pair.product();
    if !prod.is_finite() {
        return Err(Error::Numeric("adapter product is not finite".into()));
    }
    let scores = (0..prod.rows())
        .map(|d| prod.row(d).iter().map(|v| v * v).sum())
        .collect();
    Ok(ImportanceVector {
        scores,
        target: pair.target,
    })
}

/// A client's masked upload for one adapter target.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedUpdate {
    pub client_id: u32,
    pub target: usize,
    pub d_out: usize,
    /// Strictly increasing row indices `< d_out`.
    pub kept_rows: Vec<usize>,
    /// `|kept_rows| × r`.
    pub b_kept: Matrix,
    /// `r × d_in`, always sent in full.
    pub a: Matrix,
    /// Head delta; carried by at most one update per client message.
    pub head: Option<Head>,
}

impl MaskedUpdate {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }
}

/// Number of rows kept at mask ratio `ratio`: `ceil((1 − ratio)·d_out)`.
pub fn kept_count(d_out: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return param(format!("mask ratio must lie in [0, 1), got {ratio}"));
    }
    // Tolerance absorbs representation error such as (1 − 0.7)·10 = 3.0000000000000004.
    let raw = (1.0 - ratio) * d_out as f64;
    let kept = (raw - 1e-9).ceil() as usize;
    Ok(kept.clamp(1, d_out))
}

/// Indices of the `kept` highest scores, ties to the lower index, ascending.
pub fn top_rows(scores: &[f64], kept: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut out = idx[..kept.min(scores.len())].to_vec();
    out.sort_unstable();
    out
}

pub fn mask_update(
    pair: &AdapterPair,
    head: Option<Head>,
    ratio: f64,
    client_id: u32,
) -> Result<MaskedUpdate> {
    mask_update_with(&UpdateEnergy, pair, head, ratio, client_id)
}

/// Row masking driven by an arbitrary importance scorer.
pub fn mask_update_with(
    scorer: &dyn ImportanceScorer,
    pair: &AdapterPair,
    head: Option<Head>,
    ratio: f64,
    client_id: u32,
) -> Result<MaskedUpdate> {
    let kept = kept_count(pair.d_out(), ratio)?;
    let importance = scorer.score(pair)?;
    let kept_rows = top_rows(&importance.scores, kept);
    Ok(MaskedUpdate {
        client_id,
        target: pair.target,
        d_out: pair.d_out(),
        b_kept: pair.b.select_rows(&kept_rows),
        kept_rows,
        a: pair.a.clone(),
        head,
    })
}

/// Full-size `ΔW` with masked rows exactly zero.
pub fn reconstruct(update: &MaskedUpdate, d_out: usize) -> Result<Matrix> {
    if update.kept_rows.windows(2).any(|w| w[0] >= w[1]) {
        return contract("kept rows are not strictly increasing");
    }
    if update.kept_rows.last().is_some_and(|&i| i >= d_out) {
        return contract(format!("kept row index out of range for d_out={d_out}"));
    }
    if update.b_kept.rows() != update.kept_rows.len() {
        return contract("B_kept row count disagrees with kept index list");
    }
    let partial = update.b_kept.matmul(&update.a);
    let mut out = Matrix::zeros(d_out, update.d_in());
    for (k, &row) in update.kept_rows.iter().enumerate() {
        out.row_mut(row).copy_from_slice(partial.row(k));
    }
    Ok(out)
}

/// Encoded size of `update` on the wire.
pub fn measure_bytes(update: &MaskedUpdate) -> u64 {
    masked_update_bytes(
        update.kept_rows.len(),
        update.rank(),
        update.d_in(),
        update.head.as_ref().map_or(0, Head::num_params),
    )
}
