//! Soft client clustering on classifier-head updates.
//!
//! Each reporting client contributes `vec(head_k − mean_c head_c)`; the
//! vectors are PCA-reduced and a diagonal Gaussian mixture is fitted by EM.
//! Posterior responsibilities become the assignment scores `p_kc`.

mod gmm;

pub use gmm::{gmm_fit, posterior, EmOptions, GmmFit, GmmInit, GmmParams, VAR_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::numerics::{pca_fit, pca_transform, Matrix, PcaModel, RngStream};

/// Row-stochastic `K × C` matrix of cluster assignment scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    p: Matrix,
}

impl AssignmentMatrix {
    pub fn uniform(n_clients: usize, n_clusters: usize) -> Self {
        let v = 1.0 / n_clusters as f64;
        Self {
            p: Matrix::from_fn(n_clients, n_clusters, |_, _| v),
        }
    }

    /// Validates that every row is a probability vector.
    pub fn from_matrix(p: Matrix) -> Result<Self> {
        for k in 0..p.rows() {
            crate::adapter::check_assignment_row(p.row(k))?;
        }
        if p.cols() == 0 {
            return param("assignment matrix needs at least one cluster");
        }
        Ok(Self { p })
    }

    pub fn n_clients(&self) -> usize {
        self.p.rows()
    }

    pub fn n_clusters(&self) -> usize {
        self.p.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.p.row(k)
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.p.get(k, c)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub(crate) fn set_row(&mut self, k: usize, row: &[f64]) {
        self.p.row_mut(k).copy_from_slice(row);
    }

    /// Hard labels; ties go to the lowest cluster index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n_clients())
            .map(|k| {
                let row = self.row(k);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }

    /// Mean row entropy in nats.
    pub fn entropy(&self) -> f64 {
        if self.n_clients() == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.n_clients())
            .map(|k| {
                let h: f64 = self.row(k).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
                h.max(0.0)
            })
            .sum();
        total / self.n_clients() as f64
    }

    pub fn is_uniform(&self) -> bool {
        let v = 1.0 / self.n_clusters() as f64;
        self.p.data().iter().all(|&x| x == v)
    }
}

/// A client's reduced head-update vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateFeature {
    pub client_id: usize,
    pub u: Vec<f64>,
}

/// Flattens `head_k − mean_c(cluster_heads)` per client and reduces the
/// vectors with PCA. Returns `None` when fewer than two clients reported.
pub fn build_features(
    head_updates: &[(usize, Matrix)],
    cluster_heads: &[Matrix],
    pca_dim: usize,
) -> Result<Option<(PcaModel, Vec<UpdateFeature>)>> {
    if head_updates.len() < 2 {
        return Ok(None);
    }
    if cluster_heads.is_empty() {
        return param("need at least one cluster head");
    }
    let shape = cluster_heads[0].shape();
    let mut mean = Matrix::zeros(shape.0, shape.1);
    for h in cluster_heads {
        if h.shape() != shape {
            return param("cluster heads differ in shape");
        }
        mean.axpy(1.0 / cluster_heads.len() as f64, h);
    }
    let dim = mean.len();
    let mut raw = Matrix::zeros(head_updates.len(), dim);
    for (i, (_, head)) in head_updates.iter().enumerate() {
        if head.shape() != shape {
            return param(format!("client head is {:?}, cluster heads are {shape:?}", head.shape()));
        }
        for (dst, (h, m)) in raw.row_mut(i).iter_mut().zip(head.data().iter().zip(mean.data())) {
            *dst = h - m;
        }
    }
    let max_dim = (head_updates.len() - 1).min(dim);
    if pca_dim == 0 || pca_dim > max_dim {
        return param(format!("pca_dim must lie in 1..={max_dim}, got {pca_dim}"));
    }
    let model = pca_fit(&raw, pca_dim)?;
    let features = head_updates
        .iter()
        .enumerate()
        .map(|(i, (id, _))| {
            Ok(UpdateFeature {
                client_id: *id,
                u: pca_transform(&model, raw.row(i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some((model, features)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    pub warmup: usize,
    /// Upper bound on the PCA dimension; the fitted basis has
    /// `min(pca_dim, reporting − 1, head size)` components, of which the
    /// mixture uses those with above-average variance.
    pub pca_dim: usize,
    pub em: EmOptions,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_clusters: 3,
            warmup: 5,
            pca_dim: 16,
            em: EmOptions::default(),
        }
    }
}

/// Result of one server-side assignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentUpdate {
    pub p: AssignmentMatrix,
    pub gmm: Option<GmmParams>,
    pub pca: Option<PcaModel>,
}

/// Recomputes the rows of `p` for the reporting clients.
///
/// Rounds before `cfg.warmup` return `p` untouched. Once the cluster heads
/// have separated and the reporters carry non-uniform rows, component `c`
/// starts at cluster head `c` projected into the feature space; before
/// that the mixture is seeded from the reporters' rows, or by k-means++
/// when those are uniform. Non-reporting clients keep their rows.
pub fn update_assignments(
    p: &AssignmentMatrix,
    round: usize,
    head_updates: &[(usize, Matrix)],
    cluster_heads: &[Matrix],
    cfg: &ClusterConfig,
    rng: RngStream,
) -> Result<AssignmentUpdate> {
    let unchanged = || AssignmentUpdate {
        p: p.clone(),
        gmm: None,
        pca: None,
    };
    if round < cfg.warmup || p.n_clusters() == 1 {
        return Ok(unchanged());
    }
    if let Some(&(bad, _)) = head_updates.iter().find(|(id, _)| *id >= p.n_clients()) {
        return param(format!("client {bad} outside assignment matrix"));
    }
    let c = p.n_clusters();
    if head_updates.len() < c.max(2) {
        log::warn!(
            "round {round}: {} reporting clients cannot support {c} clusters; assignments unchanged",
            head_updates.len()
        );
        return Ok(unchanged());
    }
    let rows = Matrix::from_rows(&head_updates.iter().map(|(id, _)| p.row(*id).to_vec()).collect::<Vec<_>>())?;
    let heads_differ = cluster_heads.windows(2).any(|w| w[0] != w[1]);
    let anchored = heads_differ && !(AssignmentMatrix { p: rows.clone() }).is_uniform();
    let (pca, points, fit) = if anchored {
        anchored_fit(p, head_updates, cluster_heads, &rows, cfg, rng)?
    } else {
        let head_dim = cluster_heads.first().map_or(0, Matrix::len);
        let pca_dim = cfg.pca_dim.min(head_updates.len() - 1).min(head_dim);
        let Some((pca, features)) = build_features(head_updates, cluster_heads, pca_dim)? else {
            return Ok(unchanged());
        };
        let keep = kaiser(&pca.explained_variance);
        let points: Vec<Vec<f64>> = features.iter().map(|f| f.u[..keep].to_vec()).collect();
        let init = if (AssignmentMatrix { p: rows.clone() }).is_uniform() {
            GmmInit::KMeansPlusPlus
        } else {
            GmmInit::Responsibilities(rows)
        };
        let fit = gmm_fit(&points, c, &cfg.em, init, rng)?.params;
        (pca, points, fit)
    };
    let post = posterior(&fit, &points)?;
    let mut next = p.clone();
    for (i, (id, _)) in head_updates.iter().enumerate() {
        next.set_row(*id, post.row(i));
    }
    Ok(AssignmentUpdate {
        p: next,
        gmm: Some(fit),
        pca: Some(pca),
    })
}

/// Number of leading components whose variance is at least the mean of the
/// spectrum. A diagonal mixture over the trailing noise directions overfits
/// when there are only a few points per component.
fn kaiser(ev: &[f64]) -> usize {
    let mean = ev.iter().sum::<f64>() / ev.len() as f64;
    ev.iter().take_while(|&&v| v >= mean).count().max(1)
}

/// Mixture whose components start at the cluster heads' own positions, so
/// component `c` keeps meaning cluster `c` however few clients report.
fn anchored_fit(
    p: &AssignmentMatrix,
    head_updates: &[(usize, Matrix)],
    cluster_heads: &[Matrix],
    rows: &Matrix,
    cfg: &ClusterConfig,
    rng: RngStream,
) -> Result<(PcaModel, Vec<Vec<f64>>, GmmParams)> {
    let c = cluster_heads.len();
    let n = head_updates.len();
    let mut stacked: Vec<(usize, Matrix)> = head_updates.to_vec();
    stacked.extend(cluster_heads.iter().enumerate().map(|(i, h)| (usize::MAX - i, h.clone())));
    let dim = cfg.pca_dim.min(n + c - 1).min(cluster_heads[0].len());
    let (pca, features) = build_features(&stacked, cluster_heads, dim)?.expect("at least two rows");
    let keep = kaiser(&pca.explained_variance);
    let vecs: Vec<Vec<f64>> = features.iter().map(|f| f.u[..keep].to_vec()).collect();
    let (points, anchors) = vecs.split_at(n);
    // Spread of the reporters around their current clusters' anchors.
    let mut pooled = vec![0.0; keep];
    for (i, u) in points.iter().enumerate() {
        for (j, anchor) in anchors.iter().enumerate() {
            for d in 0..keep {
                pooled[d] += rows.get(i, j) * (u[d] - anchor[d]).powi(2) / n as f64;
            }
        }
    }
    pooled.iter_mut().for_each(|v| *v = v.max(VAR_FLOOR));
    let weights: Vec<f64> = (0..c)
        .map(|j| (0..p.n_clients()).map(|k| p.get(k, j)).sum::<f64>() / p.n_clients() as f64)
        .collect();
    let params = GmmParams {
        weights,
        means: anchors.to_vec(),
        variances: vec![pooled; c],
    };
    // EM refinement needs a couple of points per component; below that the
    // reporters are scored against the anchored components directly.
    let params = if n >= 2 * c {
        gmm_fit(points, c, &cfg.em, GmmInit::Warm(params), rng)?.params
    } else {
        params
    };
    Ok((pca, points.to_vec(), params))
}

/// Adjusted Rand index between two labelings. Defined as 1 when both are
/// the same trivial partition.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&m| choose2(m)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
