use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AssignmentMatrix;
use crate::error::{param, Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Lower bound on every diagonal variance.
pub const VAR_FLOOR: f64 = 1e-6;
const EMPTY_MASS: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.weights.len();
        if c == 0 || self.means.len() != c || self.variances.len() != c {
            return param("mixture needs matching, non-empty weights, means and variances");
        }
        let d = self.dim();
        if self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return param("mixture component dimensions disagree");
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return param("mixture weights must form a probability vector");
        }
        if self.variances.iter().flatten().any(|&v| !(v >= VAR_FLOOR)) {
            return param(format!("mixture variances must be at least {VAR_FLOOR}"));
        }
        Ok(())
    }

    /// `log α_c + log φ(x | μ_c, Σ_c)`.
    pub fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let mut s = self.weights[c].ln();
        for ((xi, m), v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            s -= 0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v);
        }
        s
    }

    /// Total log-likelihood of `points`.
    pub fn log_likelihood(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|x| log_sum_exp(&(0..self.n_components()).map(|c| self.component_log_density(c, x)).collect::<Vec<_>>()))
            .sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    /// Independent k-means++ starts; the fit with the highest final
    /// log-likelihood wins.
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            restarts: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub enum GmmInit {
    /// D²-weighted seeding followed by a hard nearest-seed partition.
    KMeansPlusPlus,
    /// Start from existing parameters of matching shape.
    Warm(GmmParams),
    /// Start with an M-step on an `n × C` responsibility matrix.
    Responsibilities(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Log-likelihood before the first and after every M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub reseeds: usize,
}

impl GmmFit {
    pub fn final_ll(&self) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pooled_variance(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len() as f64;
    let d = points[0].len();
    (0..d)
        .map(|j| {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
            (points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n).max(VAR_FLOOR)
        })
        .collect()
}

/// D²-weighted seeds, then one M-step on the hard nearest-seed partition.
fn kmeans_pp(points: &[Vec<f64>], c: usize, rng: &mut impl Rng, reseeds: &mut usize) -> GmmParams {
    let n = points.len();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[seeds[0]])).collect();
    while seeds.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        seeds.push(pick);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    let mut resp = Matrix::zeros(n, c);
    for (i, p) in points.iter().enumerate() {
        let nearest = (0..c)
            .min_by(|&a, &b| sq_dist(p, &points[seeds[a]]).total_cmp(&sq_dist(p, &points[seeds[b]])))
            .unwrap_or(0);
        resp.set(i, nearest, 1.0);
    }
    m_step(points, &resp, reseeds)
}

/// E-step: responsibilities (`n × C`) and the total log-likelihood.
fn e_step(params: &GmmParams, points: &[Vec<f64>]) -> (Matrix, f64) {
    let c = params.n_components();
    let mut resp = Matrix::zeros(points.len(), c);
    let mut ll = 0.0;
    for (i, x) in points.iter().enumerate() {
        let logs: Vec<f64> = (0..c).map(|j| params.component_log_density(j, x)).collect();
        let lse = log_sum_exp(&logs);
        ll += lse;
        for (j, l) in logs.iter().enumerate() {
            resp.set(i, j, (l - lse).exp());
        }
    }
    (resp, ll)
}

/// M-step. Components whose mass falls below `EMPTY_MASS` are re-seeded at
/// the point farthest from every surviving mean.
fn m_step(points: &[Vec<f64>], resp: &Matrix, reseeds: &mut usize) -> GmmParams {
    let n = points.len();
    let d = points[0].len();
    let c = resp.cols();
    let mass: Vec<f64> = (0..c).map(|j| resp.column(j).iter().sum()).collect();
    let mut means = vec![vec![0.0; d]; c];
    let mut variances = vec![vec![0.0; d]; c];
    for j in 0..c {
        if mass[j] < EMPTY_MASS {
            continue;
        }
        for (i, x) in points.iter().enumerate() {
            let r = resp.get(i, j);
            means[j].iter_mut().zip(x).for_each(|(m, xi)| *m += r * xi);
        }
        means[j].iter_mut().for_each(|m| *m /= mass[j]);
        for (i, x) in points.iter().enumerate() {
            let r = resp.get(i, j);
            for ((v, xi), m) in variances[j].iter_mut().zip(x).zip(&means[j]) {
                *v += r * (xi - m) * (xi - m);
            }
        }
        variances[j].iter_mut().for_each(|v| *v = (*v / mass[j]).max(VAR_FLOOR));
    }
    let mut weights: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
    let empty: Vec<usize> = (0..c).filter(|&j| mass[j] < EMPTY_MASS).collect();
    if !empty.is_empty() {
        let live: Vec<usize> = (0..c).filter(|&j| mass[j] >= EMPTY_MASS).collect();
        let pooled = pooled_variance(points);
        for &j in &empty {
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = live.iter().map(|&l| sq_dist(&points[a], &means[l])).fold(f64::INFINITY, f64::min);
                    let db = live.iter().map(|&l| sq_dist(&points[b], &means[l])).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap_or(0);
            log::warn!("mixture component {j} lost its mass; re-seeding at point {far}");
            means[j] = points[far].clone();
            variances[j] = pooled.clone();
            weights[j] = 1.0 / n as f64;
            *reseeds += 1;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    GmmParams {
        weights,
        means,
        variances,
    }
}

/// Fits a `c`-component diagonal Gaussian mixture by EM.
pub fn gmm_fit(
    points: &[Vec<f64>],
    c: usize,
    opts: &EmOptions,
    init: GmmInit,
    rng: RngStream,
) -> Result<GmmFit> {
    if c == 0 || points.len() < c {
        return param(format!("cannot fit {c} components to {} points", points.len()));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
        return param("mixture features must be finite vectors of one common length");
    }
    let mut reseeds = 0;
    let params = match init {
        GmmInit::KMeansPlusPlus => {
            let mut best: Option<GmmFit> = None;
            for r in 0..opts.restarts.max(1) {
                let mut reseeds = 0;
                let start = kmeans_pp(points, c, &mut rng.derive(r as u64).rng(), &mut reseeds);
                let fit = run_em(points, start, opts, reseeds)?;
                let better = best.as_ref().is_none_or(|b| fit.final_ll() > b.final_ll());
                if better {
                    best = Some(fit);
                }
            }
            return Ok(best.expect("at least one restart"));
        }
        GmmInit::Warm(p) => {
            p.validate()?;
            if p.n_components() != c || p.dim() != d {
                return param("warm-start mixture has the wrong shape");
            }
            p
        }
        GmmInit::Responsibilities(r) => {
            if r.shape() != (points.len(), c) {
                return param("initial responsibilities have the wrong shape");
            }
            m_step(points, &r, &mut reseeds)
        }
    };
    run_em(points, params, opts, reseeds)
}

fn run_em(points: &[Vec<f64>], mut params: GmmParams, opts: &EmOptions, mut reseeds: usize) -> Result<GmmFit> {
    let (mut resp, mut ll) = e_step(&params, points);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let next = m_step(points, &resp, &mut reseeds);
        let (next_resp, next_ll) = e_step(&next, points);
        iterations += 1;
        if !next_ll.is_finite() {
            return Err(Error::Numeric(format!("EM log-likelihood became {next_ll} at iteration {iterations}")));
        }
        params = next;
        resp = next_resp;
        trace.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        if gain.abs() < opts.tol {
            break;
        }
    }
    Ok(GmmFit {
        params,
        log_likelihood: trace,
        iterations,
        reseeds,
    })
}

/// Posterior responsibilities of every point (one row per point).
pub fn posterior(params: &GmmParams, points: &[Vec<f64>]) -> Result<AssignmentMatrix> {
    params.validate()?;
    let c = params.n_components();
    let mut p = Matrix::zeros(points.len(), c);
    for (i, x) in points.iter().enumerate() {
        if x.len() != params.dim() {
            return param(format!("point has {} dims, mixture has {}", x.len(), params.dim()));
        }
        let logs: Vec<f64> = (0..c).map(|j| params.component_log_density(j, x)).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            log::warn!("posterior underflow for point {i}; using a uniform row");
            p.row_mut(i).iter_mut().for_each(|v| *v = 1.0 / c as f64);
            continue;
        }
        for (j, l) in logs.iter().enumerate() {
            p.set(i, j, (l - lse).exp());
        }
    }
    AssignmentMatrix::from_matrix(p)
}
