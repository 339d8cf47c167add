//! Synthetic classification tasks with planted client groups, Dirichlet
//! label-skew partitioning, and CSV ingestion.
//!
//! A planted task has `G` groups. Every group shares the class means but
//! offsets all features by its own shift vector, and optionally rotates the
//! label map (`y ↦ (y + g) mod n_classes`) so that groups disagree on the
//! decision rule. Client `k` belongs to group `k mod G`.

mod csv_io;

pub use csv_io::{load_csv, write_csv};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::model::Batch;
use crate::numerics::{Matrix, RngStream};

/// Default minimum number of samples a client shard may hold.
pub const MIN_SHARD: usize = 8;
const PARTITION_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub d_in: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic class-conditional noise.
    pub class_cov_scale: f64,
    /// Per-group feature offsets; `None` means a single group.
    pub group_shift: Option<Vec<Vec<f64>>>,
    /// Group `g` observes label `(y + g) mod n_classes` for class `y`.
    pub label_rotation: bool,
    pub samples_per_client: usize,
}

/// Knobs for [`TaskSpec::planted`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedTask {
    pub n_classes: usize,
    pub d_in: usize,
    pub n_groups: usize,
    /// Pairwise distance between class means.
    pub class_sep: f64,
    /// Pairwise distance between group shifts, in units of `noise`.
    pub group_sep: f64,
    pub noise: f64,
    pub label_rotation: bool,
    pub samples_per_client: usize,
}

impl Default for PlantedTask {
    fn default() -> Self {
        Self {
            n_classes: 4,
            d_in: 16,
            n_groups: 3,
            class_sep: 3.0,
            group_sep: 6.0,
            noise: 1.0,
            label_rotation: true,
            samples_per_client: 100,
        }
    }
}

/// `count` points with all pairwise distances equal to `dist`, placed on
/// random orthonormal directions.
fn simplex_points(count: usize, dim: usize, dist: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return param(format!("cannot place {count} equidistant points in {dim} dimensions"));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = dist / std::f64::consts::SQRT_2;
    Ok(basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect())
}

impl TaskSpec {
    /// Draws class means and group shifts for a planted task.
    pub fn planted(cfg: &PlantedTask, rng: RngStream) -> Result<TaskSpec> {
        if cfg.n_groups == 0 {
            return param("n_groups must be at least 1");
        }
        let mut r = rng.rng();
        let class_means = simplex_points(cfg.n_classes, cfg.d_in, cfg.class_sep, &mut r)?;
        let group_shift = if cfg.n_groups > 1 {
            Some(simplex_points(cfg.n_groups, cfg.d_in, cfg.group_sep * cfg.noise, &mut r)?)
        } else {
            None
        };
        let spec = TaskSpec {
            n_classes: cfg.n_classes,
            d_in: cfg.d_in,
            class_means,
            class_cov_scale: cfg.noise,
            group_shift,
            label_rotation: cfg.label_rotation,
            samples_per_client: cfg.samples_per_client,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_groups(&self) -> usize {
        self.group_shift.as_ref().map_or(1, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in < 2 {
            return param(format!("d_in must be at least 2, got {}", self.d_in));
        }
        if self.n_classes < 2 || self.class_means.len() != self.n_classes {
            return param(format!(
                "need n_classes ≥ 2 means, got {} for n_classes={}",
                self.class_means.len(),
                self.n_classes
            ));
        }
        if !(self.class_cov_scale >= 0.0) {
            return param("class_cov_scale must be non-negative");
        }
        let shifts = self.group_shift.iter().flatten();
        for v in self.class_means.iter().chain(shifts) {
            if v.len() != self.d_in || v.iter().any(|x| !x.is_finite()) {
                return param("class means and group shifts must be finite d_in-vectors");
            }
        }
        for i in 0..self.n_classes {
            for j in 0..i {
                if self.class_means[i] == self.class_means[j] {
                    return param(format!("class means {j} and {i} coincide"));
                }
            }
        }
        Ok(())
    }

    /// Observed label of class `y` in group `g`.
    pub fn observed_label(&self, y: usize, g: usize) -> usize {
        if self.label_rotation {
            (y + g) % self.n_classes
        } else {
            y
        }
    }
}

/// A pooled labeled dataset; `groups[i]` is the planted group of sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub batch: Batch,
    pub groups: Vec<usize>,
    pub n_classes: usize,
}

/// Draws `n_per_group` samples for every group with balanced classes.
pub fn gen_task(spec: &TaskSpec, n_per_group: usize, rng: RngStream) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng.rng();
    let g_count = spec.n_groups();
    let n = g_count * n_per_group;
    let mut features = Matrix::zeros(n, spec.d_in);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for g in 0..g_count {
        for i in 0..n_per_group {
            let y = i % spec.n_classes;
            let row = features.row_mut(labels.len());
            for (d, x) in row.iter_mut().enumerate() {
                let shift = spec.group_shift.as_ref().map_or(0.0, |s| s[g][d]);
                let noise: f64 = r.sample(StandardNormal);
                *x = spec.class_means[y][d] + shift + spec.class_cov_scale * noise;
            }
            labels.push(spec.observed_label(y, g));
            groups.push(g);
        }
    }
    Ok(Dataset {
        batch: Batch::new(features, labels)?,
        groups,
        n_classes: spec.n_classes,
    })
}

/// Realized label-skew partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub k: usize,
    /// Row `k` is client `k`'s label histogram normalized to sum 1.
    pub proportions: Matrix,
    pub counts: Vec<usize>,
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.into_iter().map(|d| d / total).collect())
}

/// Splits sample indices across `k` clients, drawing each class's split from
/// `Dirichlet(α·1_k)`. Draws leaving any client under `min_shard` samples
/// are resampled.
pub fn dirichlet_partition(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    alpha: f64,
    min_shard: usize,
    rng: RngStream,
) -> Result<(PartitionPlan, Vec<Vec<usize>>)> {
    if !(alpha > 0.0) || k == 0 {
        return param(format!("dirichlet partition needs α > 0 and k ≥ 1 (α={alpha}, k={k})"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return param(format!("label {bad} out of range for {n_classes} classes"));
    }
    if labels.len() < k * min_shard {
        return param(format!(
            "{} samples cannot give {k} clients {min_shard} each",
            labels.len()
        ));
    }
    let mut r = rng.rng();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut ok = true;
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut r);
            let Some(props) = dirichlet(alpha, k, &mut r) else {
                ok = false;
                break;
            };
            let mut cum = 0.0;
            let mut start = 0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == k {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                shards[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if !ok || shards.iter().any(|s| s.len() < min_shard) {
            continue;
        }
        for s in &mut shards {
            s.sort_unstable();
        }
        let mut proportions = Matrix::zeros(k, n_classes);
        for (c, s) in shards.iter().enumerate() {
            for &i in s {
                proportions.set(c, labels[i], proportions.get(c, labels[i]) + 1.0);
            }
            let row = proportions.row_mut(c);
            row.iter_mut().for_each(|v| *v /= s.len() as f64);
        }
        let plan = PartitionPlan {
            alpha,
            k,
            proportions,
            counts: shards.iter().map(Vec::len).collect(),
        };
        return Ok((plan, shards));
    }
    Err(Error::Parameter(format!(
        "no Dirichlet draw gave every client {min_shard} samples after {PARTITION_RETRIES} tries; \
         use a larger α or dataset"
    )))
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub group: usize,
    pub train: Batch,
    pub val: Batch,
}

/// Distributes a pooled dataset to `k` clients. Client `k` draws from group
/// `k mod G` and each group's samples are split by [`dirichlet_partition`].
/// A `holdout` fraction of every shard (at least one sample) is held out.
pub fn federate(
    data: &Dataset,
    k: usize,
    alpha: f64,
    holdout: f64,
    rng: RngStream,
) -> Result<Vec<ClientData>> {
    if !(0.0..1.0).contains(&holdout) {
        return param(format!("holdout must lie in [0, 1), got {holdout}"));
    }
    let n_groups = data.groups.iter().max().map_or(1, |g| g + 1);
    if k < n_groups {
        return param(format!("{k} clients cannot cover {n_groups} groups"));
    }
    let mut clients: Vec<Option<ClientData>> = vec![None; k];
    for g in 0..n_groups {
        let members: Vec<usize> = (0..data.groups.len()).filter(|&i| data.groups[i] == g).collect();
        let ids: Vec<usize> = (g..k).step_by(n_groups).collect();
        let labels: Vec<usize> = members.iter().map(|&i| data.batch.labels[i]).collect();
        let (_, shards) = dirichlet_partition(
            &labels,
            data.n_classes,
            ids.len(),
            alpha,
            MIN_SHARD,
            rng.derive_path(&[0, g as u64]),
        )?;
        for (&id, shard) in ids.iter().zip(shards) {
            let mut idx: Vec<usize> = shard.into_iter().map(|i| members[i]).collect();
            idx.shuffle(&mut rng.derive_path(&[1, id as u64]).rng());
            let n_val = if holdout > 0.0 {
                ((holdout * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
            } else {
                0
            };
            let (val, train) = idx.split_at(n_val);
            clients[id] = Some(ClientData {
                client_id: id,
                group: g,
                train: data.batch.select(train),
                val: data.batch.select(val),
            });
        }
    }
    Ok(clients.into_iter().map(|c| c.expect("every client id is covered")).collect())
}

#[cfg(test)]
mod tests;
