//! Graphical lasso by block coordinate descent on the covariance estimate.
//!
//! Minimises `−log|Ω| + tr(SΩ) + ρ Σ_{j≠k} |ω_jk|` (the diagonal is penalised
//! too when [`GlassoOptions::penalize_diagonal`] is set). Each sweep visits
//! every column of `W = Ω⁻¹` and solves the lasso
//! `min_β ½ βᵀW₁₁β − βᵀs₁₂ + ρ‖β‖₁` by cyclic coordinate descent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, others, select};

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoOptions {
    /// Stop when the largest entry change of `W` over a sweep is below this.
    pub tol: f64,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub penalize_diagonal: bool,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            inner_tol: 1e-11,
            inner_max_iter: 10_000,
            penalize_diagonal: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub omega: DMatrix<f64>,
    /// Maintained covariance estimate `W`.
    pub sigma: DMatrix<f64>,
    pub rho: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub penalize_diagonal: bool,
    /// `log|W|` after each sweep. Each block update maximises the dual
    /// objective, so this sequence is non-decreasing.
    pub dual_trace: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinate descent for `min_β ½ βᵀVβ − βᵀu + ρ‖β‖₁`, warm-started at `beta`.
fn lasso_cd(v: &DMatrix<f64>, u: &DVector<f64>, rho: f64, beta: &mut DVector<f64>, opts: &GlassoOptions) {
    let m = u.len();
    // grad = Vβ kept current to make each coordinate step O(m).
    let mut vb = v * &*beta;
    for _ in 0..opts.inner_max_iter {
        let mut delta = 0.0_f64;
        for k in 0..m {
            let old = beta[k];
            let partial = u[k] - (vb[k] - v[(k, k)] * old);
            let new = soft_threshold(partial, rho) / v[(k, k)];
            if new != old {
                let diff = new - old;
                for r in 0..m {
                    vb[r] += v[(r, k)] * diff;
                }
                beta[k] = new;
                delta = delta.max(diff.abs());
            }
        }
        if delta < opts.inner_tol {
            break;
        }
    }
}

pub fn glasso_fit(s: &DMatrix<f64>, rho: f64, opts: &GlassoOptions) -> Result<GlassoFit> {
    let p = s.nrows();
    if !s.is_square() || p < 2 {
        return Err(Error::Invalid("glasso needs a square matrix with p ≥ 2".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::Invalid(format!("penalty must be non-negative, got {rho}")));
    }
    if (0..p).any(|j| !(s[(j, j)] > 0.0)) {
        return Err(Error::Invalid("glasso needs a strictly positive diagonal".into()));
    }
    let mut w = s.clone();
    if opts.penalize_diagonal {
        for j in 0..p {
            w[(j, j)] += rho;
        }
    }
    let mut betas: Vec<DVector<f64>> = vec![DVector::zeros(p - 1); p];
    let mut dual_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let mut change = 0.0_f64;
        for j in 0..p {
            let idx = others(p, j);
            let w11 = select(&w, &idx, &idx);
            let s12 = DVector::from_fn(p - 1, |r, _| s[(idx[r], j)]);
            lasso_cd(&w11, &s12, rho, &mut betas[j], opts);
            let w12 = &w11 * &betas[j];
            for (r, &k) in idx.iter().enumerate() {
                change = change.max((w[(k, j)] - w12[r]).abs());
                w[(k, j)] = w12[r];
                w[(j, k)] = w12[r];
            }
        }
        dual_trace.push(linalg::log_det_spd(&w, "glasso W").unwrap_or(f64::NEG_INFINITY));
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let mut omega = DMatrix::zeros(p, p);
    for j in 0..p {
        let idx = others(p, j);
        let w12 = DVector::from_fn(p - 1, |r, _| w[(idx[r], j)]);
        let w22 = w[(j, j)] - w12.dot(&betas[j]);
        if !(w22 > 0.0) {
            return Err(Error::NotPositiveDefinite("glasso column"));
        }
        let o22 = 1.0 / w22;
        omega[(j, j)] = o22;
        for (r, &k) in idx.iter().enumerate() {
            omega[(k, j)] = -betas[j][r] * o22;
        }
    }
    linalg::symmetrize(&mut omega);
    let mut fit = GlassoFit {
        omega,
        sigma: w,
        rho,
        kkt_residual: 0.0,
        iterations,
        converged,
        penalize_diagonal: opts.penalize_diagonal,
        dual_trace,
    };
    fit.kkt_residual = kkt_check(&fit, s, rho);
    Ok(fit)
}

/// Largest violation of the subgradient optimality conditions.
pub fn kkt_check(fit: &GlassoFit, s: &DMatrix<f64>, rho: f64) -> f64 {
    let p = s.nrows();
    let mut worst = 0.0_f64;
    for j in 0..p {
        for k in 0..p {
            let g = fit.sigma[(j, k)] - s[(j, k)];
            let r = if j == k {
                if fit.penalize_diagonal {
                    (g - rho).abs()
                } else {
                    g.abs()
                }
            } else if fit.omega[(j, k)] != 0.0 {
                (g - rho * fit.omega[(j, k)].signum()).abs()
            } else {
                (g.abs() - rho).max(0.0)
            };
            worst = worst.max(r);
        }
    }
    worst
}

/// Penalised objective `−log|Ω| + tr(SΩ) + ρ Σ |ω_jk|`.
pub fn glasso_objective(omega: &DMatrix<f64>, s: &DMatrix<f64>, rho: f64, penalize_diagonal: bool) -> Result<f64> {
    let p = omega.nrows();
    let mut pen = 0.0;
    for j in 0..p {
        for k in 0..p {
            if j != k || penalize_diagonal {
                pen += omega[(j, k)].abs();
            }
        }
    }
    Ok(-linalg::log_det_spd(omega, "glasso Ω")? + linalg::trace_product(s, omega) + rho * pen)
}

/// Smallest penalty at which every off-diagonal entry is zero.
pub fn rho_max(s: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    let mut m = 0.0_f64;
    for j in 0..p {
        for k in (j + 1)..p {
            m = m.max(s[(j, k)].abs());
        }
    }
    m
}
