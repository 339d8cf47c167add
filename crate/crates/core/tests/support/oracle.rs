//! Independent reference computations for tests.
//!
//! Plain nested-`Vec` arithmetic with no dependency on the library's
//! decomposition or training paths.

pub type Dense = Vec<Vec<f64>>;

pub fn transpose(m: &Dense) -> Dense {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| (0..rows).map(|i| m[i][j]).collect()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn frobenius_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Returns `(scaled_left, sigma, right)` where `scaled_left[j]` is column
/// `σ_j·u_j` of length `rows`, `right[j]` is `v_j`, sorted by descending σ.
pub fn jacobi_svd(m: &Dense) -> (Dense, Vec<f64>, Dense) {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows < cols {
        // Work on the transpose and swap roles of the factors.
        let (left, sigma, right) = jacobi_svd(&transpose(m));
        let left_n: Dense = right
            .iter()
            .zip(&sigma)
            .map(|(v, s)| v.iter().map(|x| x * s).collect())
            .collect();
        let right_n: Dense = left
            .iter()
            .zip(&sigma)
            .map(|(u, s)| {
                if *s > 0.0 {
                    u.iter().map(|x| x / s).collect()
                } else {
                    u.clone()
                }
            })
            .collect();
        return (left_n, sigma, right_n);
    }
    let mut a: Dense = transpose(m); // a[j] = column j
    let mut v: Dense = (0..cols)
        .map(|i| (0..cols).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
                for i in 0..cols {
                    let (x, y) = (v[p][i], v[q][i]);
                    v[p][i] = c * x - s * y;
                    v[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut idx: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    idx.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    (
        idx.iter().map(|&i| a[i].clone()).collect(),
        idx.iter().map(|&i| norms[i]).collect(),
        idx.iter().map(|&i| v[i].clone()).collect(),
    )
}

pub fn jacobi_singular_values(m: &Dense) -> Vec<f64> {
    jacobi_svd(m).1
}

/// Best rank-`r` approximation of `m` via the Jacobi SVD.
pub fn truncated_product(m: &Dense, r: usize) -> Dense {
    let (left, _, right) = jacobi_svd(m);
    let rows = m.len();
    let cols = m[0].len();
    let mut out = vec![vec![0.0; cols]; rows];
    for k in 0..r {
        for i in 0..rows {
            for j in 0..cols {
                out[i][j] += left[k][i] * right[k][j];
            }
        }
    }
    out
}

/// Eigenvalues (descending) of a symmetric matrix by cyclic Jacobi rotation.
pub fn symmetric_eigenvalues(s: &Dense) -> Vec<f64> {
    let n = s.len();
    let mut a = s.clone();
    for _sweep in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Eigenvalues of the unbiased sample covariance of `rows`.
pub fn covariance_eigenvalues(rows: &Dense) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov: Dense = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>()
                        / (n - 1) as f64
                })
                .collect()
        })
        .collect();
    symmetric_eigenvalues(&cov)
}

/// `scores[d] = Σ_{d'} ⟨B[d,:], A[:,d']⟩²` by explicit loops.
pub fn brute_force_importance(b: &Dense, a: &Dense) -> Vec<f64> {
    let rank = a.len();
    let d_in = a[0].len();
    b.iter()
        .map(|brow| {
            let mut total = 0.0;
            for dp in 0..d_in {
                let mut inner = 0.0;
                for k in 0..rank {
                    inner += brow[k] * a[k][dp];
                }
                total += inner * inner;
            }
            total
        })
        .collect()
}

/// Diagonal Gaussian density evaluated directly (no log-space tricks).
pub fn diag_gaussian_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let d = x.len() as f64;
    let det: f64 = var.iter().product();
    let quad: f64 = x
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, mi), vi)| (xi - mi).powi(2) / vi)
        .sum();
    (-0.5 * quad).exp() / ((2.0 * std::f64::consts::PI).powf(d / 2.0) * det.sqrt())
}

/// Multinomial logistic regression on raw features by full-batch gradient
/// descent; returns training accuracy.
pub fn logistic_regression_accuracy(x: &Dense, y: &[usize], classes: usize, iters: usize, lr: f64) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let predict = |w: &Dense, row: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = w
            .iter()
            .map(|wc| wc[d] + row.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    for _ in 0..iters {
        let mut g = vec![vec![0.0; d + 1]; classes];
        for (row, &label) in x.iter().zip(y) {
            let p = predict(&w, row);
            for c in 0..classes {
                let err = p[c] - if c == label { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += err * row[j] / n as f64;
                }
                g[c][d] += err / n as f64;
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= lr * g[c][j];
            }
        }
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| {
            let p = predict(&w, row);
            let best = (0..classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            best == label
        })
        .count();
    correct as f64 / n as f64
}

/// Accuracy of assigning each row to its nearest mean.
pub fn nearest_mean_accuracy(x: &Dense, y: &[usize], means: &Dense) -> f64 {
    let correct = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| {
            let best = (0..means.len())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == label
        })
        .count();
    correct as f64 / x.len() as f64
}
