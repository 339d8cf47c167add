use super::Matrix;
use crate::error::{param, Error, Result};

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITERS: usize = 10_000;

struct Decomposition {
    u: nalgebra::DMatrix<f64>,
    sigma: Vec<f64>,
    v_t: nalgebra::DMatrix<f64>,
    /// Column order of `u` / row order of `v_t` sorted by descending sigma.
    order: Vec<usize>,
}

fn decompose(m: &Matrix) -> Result<Decomposition> {
    if !m.is_finite() {
        return Err(Error::Numeric("SVD input contains non-finite entries".into()));
    }
    let svd = m
        .to_nalgebra()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| {
            Error::Numeric(format!(
                "SVD did not converge for {}x{} matrix (frobenius {:.6e}, max |entry| {:.6e})",
                m.rows(),
                m.cols(),
                m.frobenius(),
                m.max_abs()
            ))
        })?;
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    // Stable sort keeps ties in decomposition order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    Ok(Decomposition {
        u: svd.u.expect("requested U"),
        sigma,
        v_t: svd.v_t.expect("requested V^T"),
        order,
    })
}

/// Best rank-`r` factorization `M ≈ B·A` with `B = U_r·diag(σ)` and
/// `A = V_rᵀ`, singular values non-increasing.
pub fn svd_truncate(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let (d_out, d_in) = m.shape();
    if r == 0 || r > d_out.min(d_in) {
        return param(format!(
            "rank {r} outside [1, {}] for {d_out}x{d_in} matrix",
            d_out.min(d_in)
        ));
    }
    let dec = decompose(m)?;
    let top = &dec.order[..r];
    let b = Matrix::from_fn(d_out, r, |i, j| dec.u[(i, top[j])] * dec.sigma[top[j]]);
    let a = Matrix::from_fn(r, d_in, |i, j| dec.v_t[(top[i], j)]);
    Ok((b, a))
}

/// All singular values of `m` in non-increasing order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let dec = decompose(m)?;
    Ok(dec.order.iter().map(|&i| dec.sigma[i]).collect())
}

/// Top-`k` right singular vectors (as rows) and singular values.
pub(crate) fn right_singular(m: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    let dec = decompose(m)?;
    let top = &dec.order[..k];
    let v = Matrix::from_fn(k, m.cols(), |i, j| dec.v_t[(top[i], j)]);
    Ok((v, top.iter().map(|&i| dec.sigma[i]).collect()))
}
