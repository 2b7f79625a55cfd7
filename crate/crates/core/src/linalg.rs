//! Small dense helpers on top of nalgebra used throughout the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite(what))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// `log |m|` for a symmetric positive-definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && Cholesky::new(m.clone()).is_some()
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for k in (j + 1)..p {
            let v = 0.5 * (m[(j, k)] + m[(k, j)]);
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..p {
        for k in (j + 1)..p {
            worst = worst.max((m[(j, k)] - m[(k, j)]).abs());
        }
    }
    worst
}

pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

pub fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |r, _| v[idx[r]])
}

/// Indices `0..p` with `skip` removed.
pub fn others(p: usize, skip: usize) -> Vec<usize> {
    (0..p).filter(|&k| k != skip).collect()
}

/// `tr(a · b)` for symmetric `a`, `b` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

/// Partial correlations `-ω_jk / sqrt(ω_jj ω_kk)` with a unit diagonal.
pub fn partial_correlations(omega: &DMatrix<f64>) -> DMatrix<f64> {
    let p = omega.nrows();
    DMatrix::from_fn(p, p, |j, k| {
        if j == k {
            1.0
        } else {
            -omega[(j, k)] / (omega[(j, j)] * omega[(k, k)]).sqrt()
        }
    })
}
