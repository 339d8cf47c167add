use serde::{Deserialize, Serialize};

use super::{svd::right_singular, Matrix};
use crate::error::{param, Result};

/// Linear projection onto the leading principal axes of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }
}

/// Fits `k` principal components to the rows of `x`.
///
/// Component signs are fixed so the largest-magnitude coordinate of each
/// component is positive.
pub fn pca_fit(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return param(format!("PCA needs at least 2 samples, got {n}"));
    }
    if k == 0 || k > (n - 1).min(d) {
        return param(format!("PCA target dim {k} outside [1, {}]", (n - 1).min(d)));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let (mut components, sigma) = right_singular(&centered, k)?;
    for i in 0..k {
        let row = components.row_mut(i);
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let explained_variance = sigma.iter().map(|s| s * s / (n - 1) as f64).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

pub fn pca_transform(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.mean.len() {
        return param(format!(
            "PCA input has dim {}, model expects {}",
            x.len(),
            model.mean.len()
        ));
    }
    let centered: Vec<f64> = x.iter().zip(&model.mean).map(|(a, m)| a - m).collect();
    Ok(model.components.mat_vec(&centered))
}
