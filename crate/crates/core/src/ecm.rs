//! Expectation conditional maximisation for the spike-and-slab precision
//! prior.
//!
//! One ECM cycle computes the E-step expectations (`p*`, `d*`, and the
//! expected cross-product under missingness), then maximises the expected
//! complete-data log posterior conditionally: first the inclusion probability
//! `π`, then every column of `Ω` in ascending order, then the block scales `τ`
//! when groups are present.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glasso::{glasso_fit, GlassoOptions};
use crate::linalg::{self, others, select, select_vec};
use crate::model::{
    validate, Dataset, EcmState, GraphEstimate, Hyperparams, InitStrategy, ThresholdRule,
    TracePoint,
};

/// Lower/upper clamp for `π`.
pub const PI_FLOOR: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct EStepResult {
    pub pstar: DMatrix<f64>,
    pub dstar: DMatrix<f64>,
    pub expected_crossprod: DMatrix<f64>,
}

/// Log of `Normal(w; 0, v²/τ)` times the mixture weight.
fn log_component(w: f64, weight: f64, v: f64, tau: f64) -> f64 {
    weight.ln() - v.ln() + 0.5 * tau.ln() - 0.5 * LN_2PI - 0.5 * w * w * tau / (v * v)
}

/// Posterior slab probability of a single entry.
pub fn inclusion_probability(w: f64, pi: f64, v0: f64, v1: f64, tau: f64) -> f64 {
    let la = log_component(w, pi, v1, tau);
    let lb = log_component(w, 1.0 - pi, v0, tau);
    1.0 / (1.0 + (lb - la).exp())
}

/// `(1 − p*)/v0² + p*/v1²`, the expected inverse prior variance at `τ = 1`.
pub fn unit_penalty(pstar: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let (i0, i1) = (1.0 / (hp.v0 * hp.v0), 1.0 / (hp.v1 * hp.v1));
    let p = pstar.nrows();
    DMatrix::from_fn(p, p, |j, k| {
        if j == k {
            0.0
        } else {
            (1.0 - pstar[(j, k)]) * i0 + pstar[(j, k)] * i1
        }
    })
}

fn block_tau(tau: &DMatrix<f64>, hp: &Hyperparams, j: usize, k: usize) -> f64 {
    tau[(hp.group_of(j), hp.group_of(k))]
}

/// E-step for the edge indicators: inclusion probabilities `p*` and adaptive
/// ridge weights `d* = τ((1 − p*)/v0² + p*/v1²)`. Diagonals are unused
/// (`p*_jj = 1`, `d*_jj = 0`).
pub fn e_step_delta(
    omega: &DMatrix<f64>,
    pi: f64,
    hp: &Hyperparams,
    tau: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("precision matrix in E-step"));
    }
    let p = omega.nrows();
    let mut pstar = DMatrix::identity(p, p);
    let mut dstar = DMatrix::zeros(p, p);
    let (i0, i1) = (1.0 / (hp.v0 * hp.v0), 1.0 / (hp.v1 * hp.v1));
    for j in 0..p {
        for k in (j + 1)..p {
            let t = block_tau(tau, hp, j, k);
            let ps = inclusion_probability(omega[(j, k)], pi, hp.v0, hp.v1, t);
            let d = t * ((1.0 - ps) * i0 + ps * i1);
            pstar[(j, k)] = ps;
            pstar[(k, j)] = ps;
            dstar[(j, k)] = d;
            dstar[(k, j)] = d;
        }
    }
    Ok((pstar, dstar))
}

/// Conditional moments of the missing cells given the observed ones.
#[derive(Debug, Clone)]
pub struct MissingMoments {
    /// `Σᵢ E[xᵢxᵢᵀ | x_{i,o}, Ω]`.
    pub crossprod: DMatrix<f64>,
    /// Data with every missing cell replaced by its conditional mean.
    pub completed: DMatrix<f64>,
    /// Rows without any observed cell; they contribute `Ω⁻¹`.
    pub empty_rows: Vec<usize>,
}

/// E-step for missing cells: the conditional mean of the missing block is
/// `−Ω_mm⁻¹ Ω_mo x_o` and its conditional covariance `Ω_mm⁻¹` is added to the
/// outer product of the completed row.
pub fn e_step_missing(omega: &DMatrix<f64>, data: &Dataset) -> Result<MissingMoments> {
    let (n, p) = (data.n(), data.p());
    let mut completed = data.values().clone();
    let mut cond_cov = DMatrix::<f64>::zeros(p, p);
    let mut empty_rows = Vec::new();
    for i in 0..n {
        let (mis, obs): (Vec<usize>, Vec<usize>) = (0..p).partition(|&j| data.is_missing(i, j));
        if mis.is_empty() {
            continue;
        }
        if obs.is_empty() {
            empty_rows.push(i);
        }
        let chol = linalg::cholesky(&select(omega, &mis, &mis), "Ω_mm")?;
        if !obs.is_empty() {
            let x_o = DVector::from_fn(obs.len(), |r, _| data.values()[(i, obs[r])]);
            let rhs = select(omega, &mis, &obs) * x_o;
            let mean = -chol.solve(&rhs);
            for (r, &j) in mis.iter().enumerate() {
                completed[(i, j)] = mean[r];
            }
        } else {
            for &j in &mis {
                completed[(i, j)] = 0.0;
            }
        }
        let cov = chol.inverse();
        for (r, &j) in mis.iter().enumerate() {
            for (c, &k) in mis.iter().enumerate() {
                cond_cov[(j, k)] += cov[(r, c)];
            }
        }
    }
    let mut crossprod = completed.transpose() * &completed;
    crossprod += cond_cov;
    linalg::symmetrize(&mut crossprod);
    Ok(MissingMoments {
        crossprod,
        completed,
        empty_rows,
    })
}

/// Closed-form update `π = (a + Σ_{j<k} p*_jk − 1) / (a + b + p(p−1)/2 − 2)`,
/// clamped to `[PI_FLOOR, 1 − PI_FLOOR]`.
pub fn cm_step_pi(pstar: &DMatrix<f64>, hp: &Hyperparams) -> f64 {
    let p = pstar.nrows();
    let mut total = 0.0;
    for j in 0..p {
        for k in (j + 1)..p {
            total += pstar[(j, k)];
        }
    }
    let pairs = (p * (p - 1) / 2) as f64;
    let pi = (hp.a + total - 1.0) / (hp.a + hp.b + pairs - 2.0);
    pi.clamp(PI_FLOOR, 1.0 - PI_FLOOR)
}

/// Conditional maximisation of column `col` of `Ω` with every other column
/// held fixed.
///
/// With `A = Ω₁₁⁻¹` (the principal submatrix without `col`) and
/// `c = s₂₂ + λ`, sets `ω₁₂ = −(cA + diag(d*₁₂))⁻¹ s₁₂` and
/// `ω₂₂ = ω₁₂ᵀ A ω₁₂ + n / c`.
pub fn cm_step_column(
    omega: &DMatrix<f64>,
    crossprod: &DMatrix<f64>,
    dstar: &DMatrix<f64>,
    hp: &Hyperparams,
    n: f64,
    col: usize,
) -> Result<DMatrix<f64>> {
    let p = omega.nrows();
    if col >= p {
        return Err(Error::Invalid(format!("column {col} out of range for p = {p}")));
    }
    let idx = others(p, col);
    let a = linalg::spd_inverse(&select(omega, &idx, &idx), "Ω₁₁")?;
    let (w12, w22) = column_solution(&a, crossprod, dstar, hp, n, col, &idx)?;
    let mut out = omega.clone();
    write_column(&mut out, col, &idx, &w12, w22);
    Ok(out)
}

fn column_solution(
    a: &DMatrix<f64>,
    crossprod: &DMatrix<f64>,
    dstar: &DMatrix<f64>,
    hp: &Hyperparams,
    n: f64,
    col: usize,
    idx: &[usize],
) -> Result<(DVector<f64>, f64)> {
    let c = crossprod[(col, col)] + hp.lambda;
    let mut m = a * c;
    for (r, &k) in idx.iter().enumerate() {
        m[(r, r)] += dstar[(k, col)];
    }
    let s12 = DVector::from_fn(idx.len(), |r, _| crossprod[(idx[r], col)]);
    let chol = linalg::cholesky(&m, "column system")?;
    let w12 = -chol.solve(&s12);
    let w22 = (a * &w12).dot(&w12) + n / c;
    Ok((w12, w22))
}

fn write_column(omega: &mut DMatrix<f64>, col: usize, idx: &[usize], w12: &DVector<f64>, w22: f64) {
    for (r, &k) in idx.iter().enumerate() {
        omega[(k, col)] = w12[r];
        omega[(col, k)] = w12[r];
    }
    omega[(col, col)] = w22;
}

/// One ascending sweep of column updates, maintaining `sigma = Ω⁻¹` so each
/// `Ω₁₁⁻¹ = Σ₁₁ − σ₁₂σ₁₂ᵀ/σ₂₂` costs O(p²). `sigma` is refreshed from a
/// fresh factorisation at the end of the sweep.
pub(crate) fn sweep_columns(
    omega: &mut DMatrix<f64>,
    sigma: &mut DMatrix<f64>,
    crossprod: &DMatrix<f64>,
    dstar: &DMatrix<f64>,
    hp: &Hyperparams,
    n: f64,
) -> Result<()> {
    let p = omega.nrows();
    for col in 0..p {
        let idx = others(p, col);
        let s22 = sigma[(col, col)];
        let s12 = select_vec(&sigma.column(col).into_owned(), &idx);
        let mut a = select(sigma, &idx, &idx);
        a.ger(-1.0 / s22, &s12, &s12, 1.0);
        let (w12, w22) = column_solution(&a, crossprod, dstar, hp, n, col, &idx)?;
        write_column(omega, col, &idx, &w12, w22);

        // Block inverse of the updated Ω with Schur complement γ = n / c.
        let gamma = w22 - (&a * &w12).dot(&w12);
        if !(gamma > 0.0) {
            return Err(Error::NotPositiveDefinite("column update"));
        }
        let u = &a * &w12;
        a.ger(1.0 / gamma, &u, &u, 1.0);
        for (r, &j) in idx.iter().enumerate() {
            for (c, &k) in idx.iter().enumerate() {
                sigma[(j, k)] = a[(r, c)];
            }
            sigma[(j, col)] = -u[r] / gamma;
            sigma[(col, j)] = -u[r] / gamma;
        }
        sigma[(col, col)] = 1.0 / gamma;
    }
    linalg::symmetrize(omega);
    *sigma = linalg::spd_inverse(omega, "Ω after sweep")?;
    Ok(())
}

/// Result of the block-scale update.
#[derive(Debug, Clone)]
pub struct TauUpdate {
    pub tau: DMatrix<f64>,
    /// Blocks without any variable pair; set to the prior mode.
    pub empty_blocks: Vec<(usize, usize)>,
}

/// `τ_gg' = (a_τ − 1 + N_gg'/2) / (b_τ + ½ Σ ω_jk² d*_jk)` over the pairs of
/// block `(g, g')`, with `d*` evaluated at `τ = 1`.
pub fn cm_step_tau(
    omega: &DMatrix<f64>,
    dstar_unit: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<TauUpdate> {
    if hp.groups.is_none() {
        return Err(Error::Invalid("τ update requires a group structure".into()));
    }
    let g = hp.n_groups();
    let p = omega.nrows();
    let mut count = DMatrix::<f64>::zeros(g, g);
    let mut quad = DMatrix::<f64>::zeros(g, g);
    for j in 0..p {
        for k in (j + 1)..p {
            let (gj, gk) = (hp.group_of(j), hp.group_of(k));
            let (lo, hi) = (gj.min(gk), gj.max(gk));
            count[(lo, hi)] += 1.0;
            quad[(lo, hi)] += omega[(j, k)].powi(2) * dstar_unit[(j, k)];
        }
    }
    let mut tau = DMatrix::zeros(g, g);
    let mut empty_blocks = Vec::new();
    for lo in 0..g {
        for hi in lo..g {
            if count[(lo, hi)] == 0.0 {
                empty_blocks.push((lo, hi));
            }
            let t = (hp.a_tau - 1.0 + 0.5 * count[(lo, hi)]) / (hp.b_tau + 0.5 * quad[(lo, hi)]);
            tau[(lo, hi)] = t;
            tau[(hi, lo)] = t;
        }
    }
    Ok(TauUpdate { tau, empty_blocks })
}

/// Log-likelihood part `(n/2) log|Ω| − ½ tr(SΩ)`.
pub(crate) fn gaussian_term(omega: &DMatrix<f64>, crossprod: &DMatrix<f64>, n: f64) -> Result<f64> {
    let logdet = linalg::log_det_spd(omega, "Ω")?;
    Ok(0.5 * n * logdet - 0.5 * linalg::trace_product(crossprod, omega))
}

fn tau_prior_term(tau: &DMatrix<f64>, hp: &Hyperparams) -> f64 {
    if hp.groups.is_none() {
        return 0.0;
    }
    let g = tau.nrows();
    let mut total = 0.0;
    for lo in 0..g {
        for hi in lo..g {
            let t = tau[(lo, hi)];
            total += (hp.a_tau - 1.0) * t.ln() - hp.b_tau * t;
        }
    }
    total
}

/// Expected complete-data log posterior with the E-step quantities
/// (`state.pstar`, `state.dstar`) held fixed, up to an additive constant.
///
/// Block-scale terms are included when `hp.groups` is set; `state.dstar` is
/// then read as `τ · d*_unit` under `state.tau`.
pub fn log_posterior(
    state: &EcmState,
    crossprod: &DMatrix<f64>,
    hp: &Hyperparams,
    n: f64,
) -> Result<f64> {
    let omega = &state.omega;
    let p = omega.nrows();
    let mut q = gaussian_term(omega, crossprod, n)?;
    q -= 0.5 * hp.lambda * omega.diagonal().sum();
    let pi = state.pi;
    let logit = (pi / (1.0 - pi)).ln();
    for j in 0..p {
        for k in (j + 1)..p {
            q -= 0.5 * omega[(j, k)].powi(2) * state.dstar[(j, k)];
            q += state.pstar[(j, k)] * logit;
            if hp.groups.is_some() {
                q += 0.5 * block_tau(&state.tau, hp, j, k).ln();
            }
        }
    }
    let pairs = (p * (p - 1) / 2) as f64;
    q += pairs * (1.0 - pi).ln();
    q += (hp.a - 1.0) * pi.ln() + (hp.b - 1.0) * (1.0 - pi).ln();
    q += tau_prior_term(&state.tau, hp);
    Ok(q)
}

/// Observed-data log likelihood, up to `−(#observed / 2) log 2π`.
///
/// With complete data this is `(n/2) log|Ω| − ½ tr(XᵀXΩ)`; otherwise each row
/// contributes its marginal density over the observed cells.
pub fn observed_log_likelihood(omega: &DMatrix<f64>, data: &Dataset) -> Result<f64> {
    if !data.has_missing() {
        return gaussian_term(omega, &data.zero_filled_crossprod(), data.n() as f64);
    }
    let sigma = linalg::spd_inverse(omega, "Ω")?;
    let p = data.p();
    let mut total = 0.0;
    for i in 0..data.n() {
        let obs: Vec<usize> = (0..p).filter(|&j| !data.is_missing(i, j)).collect();
        if obs.is_empty() {
            continue;
        }
        let chol = linalg::cholesky(&select(&sigma, &obs, &obs), "Σ_oo")?;
        let x = DVector::from_fn(obs.len(), |r, _| data.values()[(i, obs[r])]);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += -0.5 * logdet - 0.5 * x.dot(&chol.solve(&x));
    }
    Ok(total)
}

/// Log prior of `(Ω, π, τ)` with the edge indicators summed out.
pub fn log_prior(omega: &DMatrix<f64>, pi: f64, tau: &DMatrix<f64>, hp: &Hyperparams) -> f64 {
    let p = omega.nrows();
    let mut total = -0.5 * hp.lambda * omega.diagonal().sum();
    for j in 0..p {
        for k in (j + 1)..p {
            let t = block_tau(tau, hp, j, k);
            let la = log_component(omega[(j, k)], pi, hp.v1, t);
            let lb = log_component(omega[(j, k)], 1.0 - pi, hp.v0, t);
            let m = la.max(lb);
            total += m + ((la - m).exp() + (lb - m).exp()).ln();
        }
    }
    total += (hp.a - 1.0) * pi.ln() + (hp.b - 1.0) * (1.0 - pi).ln();
    total + tau_prior_term(tau, hp)
}

/// Observed-data log posterior, the quantity every ECM cycle cannot decrease.
pub fn marginal_log_posterior(state: &EcmState, data: &Dataset, hp: &Hyperparams) -> Result<f64> {
    Ok(observed_log_likelihood(&state.omega, data)?
        + log_prior(&state.omega, state.pi, &state.tau, hp))
}

/// Starting precision matrix built from the (initial) cross-product matrix.
pub fn initial_omega(crossprod: &DMatrix<f64>, n: f64, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    let p = crossprod.nrows();
    match hp.init {
        InitStrategy::Ridge => {
            let mut m = crossprod / n;
            for j in 0..p {
                m[(j, j)] += hp.lambda / n;
            }
            linalg::spd_inverse(&m, "ridge initialisation")
        }
        InitStrategy::Diagonal => Ok(DMatrix::from_fn(p, p, |j, k| {
            if j == k {
                n / (crossprod[(j, j)] + hp.lambda)
            } else {
                0.0
            }
        })),
        InitStrategy::Glasso { rho } => {
            let fit = glasso_fit(&(crossprod / n), rho, &GlassoOptions::default())?;
            Ok(fit.omega)
        }
    }
}

/// Fresh state for a fit, or a copy of the warm start resized to the groups of
/// `hp`.
pub(crate) fn starting_state(
    crossprod: &DMatrix<f64>,
    n: f64,
    hp: &Hyperparams,
    init: Option<&EcmState>,
) -> Result<EcmState> {
    let g = hp.n_groups();
    match init {
        Some(s) => {
            if s.omega.nrows() != crossprod.nrows() {
                return Err(Error::Dimension {
                    expected: format!("{0}x{0} warm start", crossprod.nrows()),
                    found: format!("{0}x{0}", s.omega.nrows()),
                });
            }
            if !linalg::is_spd(&s.omega) {
                return Err(Error::NotPositiveDefinite("warm start"));
            }
            let mut s = s.clone();
            if s.tau.nrows() != g {
                s.tau = DMatrix::from_element(g, g, 1.0);
            }
            s.iter = 0;
            Ok(s)
        }
        None => {
            let omega = initial_omega(crossprod, n, hp)?;
            Ok(EcmState::new(omega, hp.a / (hp.a + hp.b), g))
        }
    }
}

/// One full ECM cycle with a fixed cross-product matrix.
pub(crate) fn ecm_cycle(
    state: &mut EcmState,
    sigma: &mut DMatrix<f64>,
    crossprod: &DMatrix<f64>,
    hp: &Hyperparams,
    n: f64,
) -> Result<Vec<(usize, usize)>> {
    let (pstar, dstar) = e_step_delta(&state.omega, state.pi, hp, &state.tau)?;
    state.pi = cm_step_pi(&pstar, hp);
    sweep_columns(&mut state.omega, sigma, crossprod, &dstar, hp, n)?;
    let mut empty = Vec::new();
    if hp.groups.is_some() {
        let update = cm_step_tau(&state.omega, &unit_penalty(&pstar, hp), hp)?;
        state.tau = update.tau;
        empty = update.empty_blocks;
    }
    state.pstar = pstar;
    state.dstar = dstar;
    state.iter += 1;
    Ok(empty)
}

/// Refreshes `p*`/`d*` so they describe the returned `Ω`.
pub(crate) fn finalize_state(state: &mut EcmState, hp: &Hyperparams) -> Result<()> {
    let (pstar, dstar) = e_step_delta(&state.omega, state.pi, hp, &state.tau)?;
    state.pstar = pstar;
    state.dstar = dstar;
    Ok(())
}

/// Rule used for [`GraphEstimate::adjacency`] by the fitting routines.
pub const DEFAULT_RULE: ThresholdRule = ThresholdRule::PstarThreshold(0.5);

/// Posterior-mode search for a Gaussian graphical model.
///
/// Iterates E-step and CM-steps until the largest entrywise change of `Ω`
/// falls below `hp.tol` or `hp.max_iter` cycles have run. Missing cells are
/// handled through [`e_step_missing`]. The trace records the observed-data
/// log posterior after every cycle.
pub fn fit_ecm(data: &Dataset, hp: &Hyperparams, init: Option<&EcmState>) -> Result<GraphEstimate> {
    fit_ecm_inner(data, hp, init, data.has_missing())
}

pub(crate) fn fit_ecm_inner(
    data: &Dataset,
    hp: &Hyperparams,
    init: Option<&EcmState>,
    missing_path: bool,
) -> Result<GraphEstimate> {
    let report = validate(hp, data);
    if !report.is_ok() {
        return Err(Error::Invalid(report.violations.join("; ")));
    }
    let n = data.n() as f64;
    let mut warnings = Vec::new();
    let complete_s = (!missing_path).then(|| data.zero_filled_crossprod());
    let init_s = match &complete_s {
        Some(s) => s.clone(),
        None => data.zero_filled_crossprod(),
    };
    let mut state = starting_state(&init_s, n, hp, init)?;
    let mut sigma = linalg::spd_inverse(&state.omega, "initial Ω")?;
    let mut trace = vec![TracePoint {
        iteration: 0,
        objective: marginal_log_posterior(&state, data, hp)?,
    }];
    let mut converged = false;
    let mut empty_rows_reported = false;
    let mut empty_blocks_reported = false;
    for _ in 0..hp.max_iter {
        let previous = state.omega.clone();
        let s = match &complete_s {
            Some(s) => s.clone(),
            None => {
                let moments = e_step_missing(&state.omega, data)?;
                if !moments.empty_rows.is_empty() && !empty_rows_reported {
                    warnings.push(format!(
                        "{} fully missing rows contribute the prior covariance",
                        moments.empty_rows.len()
                    ));
                    empty_rows_reported = true;
                }
                moments.crossprod
            }
        };
        let empty = ecm_cycle(&mut state, &mut sigma, &s, hp, n)?;
        if !empty.is_empty() && !empty_blocks_reported {
            warnings.push(format!(
                "{} empty τ blocks held at the prior mode",
                empty.len()
            ));
            empty_blocks_reported = true;
        }
        trace.push(TracePoint {
            iteration: state.iter,
            objective: marginal_log_posterior(&state, data, hp)?,
        });
        if linalg::max_abs_diff(&state.omega, &previous) < hp.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("did not converge within {} iterations", hp.max_iter));
    }
    finalize_state(&mut state, hp)?;
    let adjacency = crate::model::threshold_graph(&state.omega, Some(&state.pstar), DEFAULT_RULE)?;
    Ok(GraphEstimate {
        state,
        adjacency,
        v0_selected: hp.v0,
        trace,
        converged,
        warnings,
    })
}
