//! Regularization paths, K-fold cross-validation and imputation scoring.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula::{fit_copula, normal_scores, LatentSampler, SaemSchedule};
use crate::ecm::{e_step_missing, fit_ecm};
use crate::error::{Error, Result};
use crate::glasso::{glasso_fit, rho_max, GlassoFit, GlassoOptions};
use crate::linalg;
use crate::model::{Dataset, GraphEstimate, Hyperparams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Emgs,
    EmgsCopula { schedule: SaemSchedule },
    Glasso,
}

/// Fits along an increasing `v0` grid with optional cross-validation scores.
#[derive(Debug, Clone)]
pub struct PathResult {
    pub v0_grid: Vec<f64>,
    pub fits: Vec<GraphEstimate>,
    pub cv_scores: Option<Vec<f64>>,
    pub v0_selected: f64,
    pub selected: usize,
}

impl PathResult {
    pub fn selected_fit(&self) -> &GraphEstimate {
        &self.fits[self.selected]
    }
}

#[derive(Debug, Clone)]
pub struct GlassoPath {
    pub rho_grid: Vec<f64>,
    pub fits: Vec<GlassoFit>,
    pub cv_scores: Option<Vec<f64>>,
    pub rho_selected: f64,
    pub selected: usize,
}

impl GlassoPath {
    pub fn selected_fit(&self) -> &GlassoFit {
        &self.fits[self.selected]
    }
}

/// `min:max:count[:log]` grid description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub log: bool,
}

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Invalid(format!("grid `{s}` is not min:max:count[:log]"));
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let min: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let max: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        let log = match parts.get(3).map(|t| t.trim()) {
            None | Some("lin") | Some("linear") => false,
            Some("log") => true,
            Some(_) => return Err(bad()),
        };
        let spec = Self { min, max, count, log };
        spec.values()?;
        Ok(spec)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let (min, max, count) = (self.min, self.max, self.count);
        if count == 0 || !(min > 0.0) || !max.is_finite() || max < min || (count > 1 && max == min) {
            return Err(Error::Invalid(format!(
                "grid needs 0 < min < max and count >= 1 (got {min}:{max}:{count})"
            )));
        }
        if count == 1 {
            return Ok(vec![min]);
        }
        let step = |r: usize| r as f64 / (count - 1) as f64;
        Ok((0..count)
            .map(|r| {
                if self.log {
                    (min.ln() + step(r) * (max.ln() - min.ln())).exp()
                } else {
                    min + step(r) * (max - min)
                }
            })
            .collect())
    }
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty grid".into()));
    }
    if grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("grid must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Log-spaced glasso penalties from `ratio · ρ_max` to `ρ_max`, increasing.
pub fn glasso_rho_grid(s: &DMatrix<f64>, count: usize, ratio: f64) -> Result<Vec<f64>> {
    let top = rho_max(s);
    if !(top > 0.0) {
        return Err(Error::Invalid("covariance has no off-diagonal signal".into()));
    }
    GridSpec {
        min: top * ratio,
        max: top,
        count,
        log: true,
    }
    .values()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Worker threads for fold fits; `0` or `1` runs sequentially.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            jobs: 1,
        }
    }
}

fn path_over<F>(grid: &[f64], hp: &Hyperparams, mut fit: F) -> Result<Vec<GraphEstimate>>
where
    F: FnMut(&Hyperparams, Option<&crate::model::EcmState>) -> Result<GraphEstimate>,
{
    check_grid(grid)?;
    let mut fits: Vec<GraphEstimate> = Vec::with_capacity(grid.len());
    for &v0 in grid {
        let next = fit(&hp.with_v0(v0), fits.last().map(|f| &f.state))?;
        fits.push(next);
    }
    Ok(fits)
}

fn unselected(grid: &[f64], fits: Vec<GraphEstimate>) -> PathResult {
    let last = fits.len() - 1;
    PathResult {
        v0_grid: grid.to_vec(),
        fits,
        cv_scores: None,
        v0_selected: grid[last],
        selected: last,
    }
}

/// Warm-started EMGS fits along an increasing `v0` grid (`Ω`, `π`, `τ`
/// carried forward). Without scores the largest `v0` is reported as selected.
pub fn fit_path(data: &Dataset, hp: &Hyperparams, grid: &[f64]) -> Result<PathResult> {
    let fits = path_over(grid, hp, |h, init| fit_ecm(data, h, init))?;
    Ok(unselected(grid, fits))
}

/// Copula fits along the grid; scores and `Q` are carried forward.
pub fn fit_copula_path(
    data: &Dataset,
    hp: &Hyperparams,
    grid: &[f64],
    schedule: &SaemSchedule,
    seed: u64,
) -> Result<PathResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fits = path_over(grid, hp, |h, init| fit_copula(data, h, schedule, &mut rng, init))?;
    Ok(unselected(grid, fits))
}

/// Test-row indices of each fold after a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::Invalid(format!("need 2 <= folds <= n, got {folds} folds for n = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (r, i) in idx.into_iter().enumerate() {
        out[r % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Mean Gaussian log-likelihood per test row, up to `−(p/2) log 2π`:
/// `½ log|Ω| − ½ tr(S Ω) / n_test`.
pub fn heldout_score(omega: &DMatrix<f64>, s_test: &DMatrix<f64>, n_test: usize) -> Result<f64> {
    let logdet = linalg::log_det_spd(omega, "fitted Ω")?;
    Ok(0.5 * logdet - 0.5 * linalg::trace_product(s_test, omega) / n_test as f64)
}

fn split(data: &Dataset, test: &[usize]) -> Result<(Dataset, Dataset)> {
    let in_test: Vec<bool> = {
        let mut m = vec![false; data.n()];
        for &i in test {
            m[i] = true;
        }
        m
    };
    let train: Vec<usize> = (0..data.n()).filter(|&i| !in_test[i]).collect();
    Ok((data.rows(&train)?, data.rows(test)?))
}

fn run_jobs<T, F>(count: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(f).collect())
}

/// Index of the best score; ties go to the later (larger) grid value.
fn argmax_last(scores: &[f64]) -> usize {
    let mut best = 0;
    for (r, &s) in scores.iter().enumerate() {
        if s >= scores[best] {
            best = r;
        }
    }
    best
}

fn mean_scores(per_fold: &[Vec<f64>]) -> Vec<f64> {
    let g = per_fold[0].len();
    (0..g)
        .map(|r| per_fold.iter().map(|f| f[r]).sum::<f64>() / per_fold.len() as f64)
        .collect()
}

/// Scores of one fold given the fitted precisions along the grid.
///
/// Complete data use the test cross-product directly. Otherwise the expected
/// test cross-product is computed under every fitted `Ω`, averaged over the
/// grid, and that single plug-in is scored against each `Ω`.
fn fold_scores(omegas: &[DMatrix<f64>], expected: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>, n_test: usize, plug_in: bool) -> Result<Vec<f64>> {
    if !plug_in {
        let s = expected(&omegas[0])?;
        return omegas.iter().map(|o| heldout_score(o, &s, n_test)).collect();
    }
    let p = omegas[0].nrows();
    let mut avg = DMatrix::zeros(p, p);
    for o in omegas {
        avg += expected(o)?;
    }
    avg /= omegas.len() as f64;
    omegas.iter().map(|o| heldout_score(o, &avg, n_test)).collect()
}

/// K-fold cross-validation of `v0` for the Gaussian model, then a full-data
/// path. Missing cells are scored through the grid-averaged expected
/// cross-product of the test rows.
pub fn cv_select(data: &Dataset, hp: &Hyperparams, grid: &[f64], cv: &CvOptions) -> Result<PathResult> {
    check_grid(grid)?;
    let folds = fold_assignment(data.n(), cv.folds, cv.seed)?;
    let plug_in = data.has_missing();
    let per_fold = run_jobs(folds.len(), cv.jobs, |f| {
        let (train, test) = split(data, &folds[f])?;
        let path = fit_path(&train, hp, grid)?;
        let omegas: Vec<DMatrix<f64>> = path.fits.iter().map(|e| e.state.omega.clone()).collect();
        let expected = |o: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            if plug_in {
                Ok(e_step_missing(o, &test)?.crossprod)
            } else {
                Ok(test.zero_filled_crossprod())
            }
        };
        fold_scores(&omegas, expected, test.n(), plug_in)
    })?;
    let scores = mean_scores(&per_fold);
    let full = fit_path(data, hp, grid)?;
    Ok(with_scores(full, scores))
}

fn with_scores(mut path: PathResult, scores: Vec<f64>) -> PathResult {
    let best = argmax_last(&scores);
    path.selected = best;
    path.v0_selected = path.v0_grid[best];
    for fit in &mut path.fits {
        fit.v0_selected = path.v0_selected;
    }
    path.cv_scores = Some(scores);
    path
}

/// Monte Carlo `E[ZᵀZ]` of the test rows' latent scores under `Ω`.
pub fn expected_latent_crossprod(
    data: &Dataset,
    omega: &DMatrix<f64>,
    schedule: &SaemSchedule,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = LatentSampler::new(data, schedule.fixed_continuous);
    let mut z = normal_scores(data);
    let burn = schedule.samples_per_iter * schedule.sweeps_per_sample;
    for _ in 0..burn {
        sampler.sweep(&mut z, omega, &mut rng)?;
    }
    let p = data.p();
    let mut acc = DMatrix::zeros(p, p);
    let draws = 4 * schedule.samples_per_iter;
    for _ in 0..draws {
        for _ in 0..schedule.sweeps_per_sample {
            sampler.sweep(&mut z, omega, &mut rng)?;
        }
        acc += z.tr_mul(&z);
    }
    Ok(acc / draws as f64)
}

/// Cross-validation for copula fits, scored by the grid-averaged expected
/// latent cross-product of the test rows.
pub fn cv_select_copula(
    data: &Dataset,
    hp: &Hyperparams,
    grid: &[f64],
    schedule: &SaemSchedule,
    cv: &CvOptions,
) -> Result<PathResult> {
    check_grid(grid)?;
    let folds = fold_assignment(data.n(), cv.folds, cv.seed)?;
    let per_fold = run_jobs(folds.len(), cv.jobs, |f| {
        let (train, test) = split(data, &folds[f])?;
        let fold_seed = cv.seed.wrapping_add(1 + f as u64);
        let path = fit_copula_path(&train, hp, grid, schedule, fold_seed)?;
        let omegas: Vec<DMatrix<f64>> = path.fits.iter().map(|e| e.state.omega.clone()).collect();
        let expected = |o: &DMatrix<f64>| expected_latent_crossprod(&test, o, schedule, fold_seed);
        fold_scores(&omegas, expected, test.n(), true)
    })?;
    let scores = mean_scores(&per_fold);
    let full = fit_copula_path(data, hp, grid, schedule, cv.seed)?;
    Ok(with_scores(full, scores))
}

fn complete_covariance(data: &Dataset) -> Result<DMatrix<f64>> {
    if data.has_missing() {
        return Err(Error::Invalid("graphical lasso needs complete data".into()));
    }
    Ok(data.zero_filled_crossprod() / data.n() as f64)
}

/// Glasso fits on `S/n` over an increasing `ρ` grid.
pub fn glasso_path(data: &Dataset, rho_grid: &[f64], opts: &GlassoOptions) -> Result<GlassoPath> {
    check_grid(rho_grid)?;
    let s = complete_covariance(data)?;
    let fits = rho_grid
        .iter()
        .map(|&rho| glasso_fit(&s, rho, opts))
        .collect::<Result<Vec<_>>>()?;
    let last = fits.len() - 1;
    Ok(GlassoPath {
        rho_grid: rho_grid.to_vec(),
        fits,
        cv_scores: None,
        rho_selected: rho_grid[last],
        selected: last,
    })
}

/// K-fold cross-validation of the glasso penalty; ties go to larger `ρ`.
pub fn cv_select_glasso(
    data: &Dataset,
    rho_grid: &[f64],
    opts: &GlassoOptions,
    cv: &CvOptions,
) -> Result<GlassoPath> {
    check_grid(rho_grid)?;
    complete_covariance(data)?;
    let folds = fold_assignment(data.n(), cv.folds, cv.seed)?;
    let per_fold = run_jobs(folds.len(), cv.jobs, |f| {
        let (train, test) = split(data, &folds[f])?;
        let path = glasso_path(&train, rho_grid, opts)?;
        let s_test = test.zero_filled_crossprod();
        path.fits
            .iter()
            .map(|fit| heldout_score(&fit.omega, &s_test, test.n()))
            .collect::<Result<Vec<_>>>()
    })?;
    let scores = mean_scores(&per_fold);
    let mut full = glasso_path(data, rho_grid, opts)?;
    let best = argmax_last(&scores);
    full.selected = best;
    full.rho_selected = rho_grid[best];
    full.cv_scores = Some(scores);
    Ok(full)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImputeMethod {
    /// EMGS at the given hyperparameters.
    Emgs(Hyperparams),
    /// EMGS with `v0` chosen by missing-data cross-validation.
    EmgsCv {
        hp: Hyperparams,
        grid: Vec<f64>,
        cv: CvOptions,
    },
    /// Pairwise-complete covariance, eigenvalue-floored to be positive definite.
    Empirical,
    ColumnMean,
}

fn observed_means(data: &Dataset) -> Result<Vec<f64>> {
    (0..data.p())
        .map(|j| {
            let obs: Vec<f64> = (0..data.n()).filter_map(|i| data.get(i, j)).collect();
            if obs.is_empty() {
                Err(Error::Invalid(format!("column {} fully missing", j + 1)))
            } else {
                Ok(obs.iter().sum::<f64>() / obs.len() as f64)
            }
        })
        .collect()
}

fn centered(data: &Dataset, means: &[f64]) -> Result<Dataset> {
    let values = DMatrix::from_fn(data.n(), data.p(), |i, j| data.values()[(i, j)] - means[j]);
    Dataset::new(
        values,
        data.missing().clone(),
        data.kinds().to_vec(),
        data.column_names().to_vec(),
    )
}

/// Pairwise-complete covariance of centered data with eigenvalues floored at
/// `1e-6 · λ_max`.
pub fn pairwise_covariance(data: &Dataset) -> Result<DMatrix<f64>> {
    let p = data.p();
    let mut cov = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..data.n() {
                if let (Some(a), Some(b)) = (data.get(i, j), data.get(i, k)) {
                    sum += a * b;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Invalid(format!(
                    "columns {} and {} are never observed together",
                    j + 1,
                    k + 1
                )));
            }
            cov[(j, k)] = sum / count as f64;
            cov[(k, j)] = cov[(j, k)];
        }
    }
    let eig = cov.symmetric_eigen();
    let floor = 1e-6 * eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Data with every missing cell replaced by its imputed value.
pub fn impute(data: &Dataset, method: &ImputeMethod) -> Result<DMatrix<f64>> {
    let means = observed_means(data)?;
    let c = centered(data, &means)?;
    let omega = match method {
        ImputeMethod::ColumnMean => None,
        ImputeMethod::Empirical => Some(linalg::spd_inverse(&pairwise_covariance(&c)?, "pairwise covariance")?),
        ImputeMethod::Emgs(hp) => Some(fit_ecm(&c, hp, None)?.state.omega),
        ImputeMethod::EmgsCv { hp, grid, cv } => {
            Some(cv_select(&c, hp, grid, cv)?.selected_fit().state.omega.clone())
        }
    };
    let completed = match omega {
        Some(o) => e_step_missing(&o, &c)?.completed,
        None => c.values().clone(),
    };
    Ok(DMatrix::from_fn(data.n(), data.p(), |i, j| completed[(i, j)] + means[j]))
}

/// Mean squared error over the hidden cells after hiding `mask` in
/// `data_complete` and imputing with `method`.
pub fn impute_score(data_complete: &Dataset, mask: &DMatrix<bool>, method: &ImputeMethod) -> Result<f64> {
    if mask.shape() != (data_complete.n(), data_complete.p()) {
        return Err(Error::Dimension {
            expected: format!("{}x{} mask", data_complete.n(), data_complete.p()),
            found: format!("{}x{}", mask.nrows(), mask.ncols()),
        });
    }
    let hidden = mask.iter().filter(|&&m| m).count();
    if hidden == 0 {
        return Err(Error::Invalid("imputation mask hides no cells".into()));
    }
    if mask.zip_map(data_complete.missing(), |a, b| a && b).iter().any(|&x| x) {
        return Err(Error::Invalid("mask hides cells that are already missing".into()));
    }
    let masked = data_complete.with_hidden(mask)?;
    let filled = impute(&masked, method)?;
    let mut sse = 0.0;
    for i in 0..mask.nrows() {
        for j in 0..mask.ncols() {
            if mask[(i, j)] {
                sse += (filled[(i, j)] - data_complete.values()[(i, j)]).powi(2);
            }
        }
    }
    Ok(sse / hidden as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = GridSpec::parse("0.01:1:3:log").unwrap().values().unwrap();
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[1] - 0.1).abs() < 1e-12 && (g[2] - 1.0).abs() < 1e-12);
        let g = GridSpec::parse("1:2:3").unwrap().values().unwrap();
        assert_eq!(g, vec![1.0, 1.5, 2.0]);
        assert!(GridSpec::parse("1:2").is_err());
        assert!(GridSpec::parse("0:1:3:log").is_err());
        assert!(GridSpec::parse("2:1:3").is_err());
        assert!(GridSpec::parse("1:2:3:cubic").is_err());
        assert!(check_grid(&[0.1, 0.1]).is_err());
    }

    #[test]
    fn folds_partition_rows() {
        let f = fold_assignment(23, 5, 4).unwrap();
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(f.iter().all(|x| x.len() == 4 || x.len() == 5));
        assert_eq!(f, fold_assignment(23, 5, 4).unwrap());
        assert_ne!(f, fold_assignment(23, 5, 5).unwrap());
        assert!(fold_assignment(4, 5, 0).is_err());
        assert_eq!(fold_assignment(6, 6, 0).unwrap().iter().map(Vec::len).max(), Some(1));
    }

    #[test]
    fn ties_pick_the_larger_grid_value() {
        assert_eq!(argmax_last(&[1.0, 3.0, 3.0, 2.0]), 2);
        assert_eq!(argmax_last(&[5.0]), 0);
    }

    #[test]
    fn heldout_score_identity() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 2.0]);
        let score = heldout_score(&DMatrix::identity(2, 2), &s, 2).unwrap();
        assert!((score + 1.5).abs() < 1e-15);
    }

    #[test]
    fn pairwise_covariance_is_pd() {
        let vals = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 0.5, -2.0, -1.5, -0.5, 0.0, 0.0]);
        let mut hide = DMatrix::from_element(4, 3, false);
        hide[(0, 1)] = true;
        hide[(2, 2)] = true;
        let data = Dataset::from_complete(vals).unwrap().with_hidden(&hide).unwrap();
        let cov = pairwise_covariance(&data).unwrap();
        assert!(linalg::is_spd(&cov));
        assert!((cov[(0, 0)] - (1.0 + 1.0 + 0.25 + 0.25) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn column_mean_imputation() {
        let vals = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let complete = Dataset::from_complete(vals).unwrap();
        let mut mask = DMatrix::from_element(3, 2, false);
        mask[(2, 0)] = true;
        let mse = impute_score(&complete, &mask, &ImputeMethod::ColumnMean).unwrap();
        assert!((mse - 9.0).abs() < 1e-12);
        let empty = DMatrix::from_element(3, 2, false);
        assert!(impute_score(&complete, &empty, &ImputeMethod::ColumnMean).is_err());
    }
}
