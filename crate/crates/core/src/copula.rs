//! Gaussian copula graphical models through the extended rank likelihood.
//!
//! Each observed column is modelled as a monotone transform of a latent
//! Gaussian score. The scores are resampled by Gibbs sweeps restricted to the
//! region that respects the observed within-column ordering, and the expected
//! cross-product `E[ZᵀZ]` is tracked by stochastic approximation. Every outer
//! iteration then runs one full ECM cycle with that expectation in place of
//! `XᵀX`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ecm::{self, ecm_cycle, finalize_state, gaussian_term, log_prior, starting_state};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{validate, Dataset, EcmState, GraphEstimate, Hyperparams, TracePoint, VariableKind};

/// Per-cell truncation limits of the latent scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankBounds {
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StepSize {
    /// `t_k = 1/k`.
    Harmonic,
    /// `t_k = k^(−exponent)`; exponent in `(0.5, 1]` keeps the usual
    /// stochastic-approximation conditions.
    Power { exponent: f64 },
    /// `t_k = t` for every `k` (`t = 1` is Monte Carlo EM).
    Constant { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaemSchedule {
    pub step: StepSize,
    pub samples_per_iter: usize,
    pub total_iter: usize,
    pub sweeps_per_sample: usize,
    /// Keep continuous columns at their normal scores instead of resampling
    /// them under rank constraints.
    pub fixed_continuous: bool,
}

impl Default for SaemSchedule {
    fn default() -> Self {
        Self {
            step: StepSize::Harmonic,
            samples_per_iter: 5,
            total_iter: 200,
            sweeps_per_sample: 1,
            fixed_continuous: false,
        }
    }
}

impl SaemSchedule {
    pub fn step_size(&self, k: usize) -> f64 {
        let k = k.max(1) as f64;
        match self.step {
            StepSize::Harmonic => 1.0 / k,
            StepSize::Power { exponent } => k.powf(-exponent),
            StepSize::Constant { t } => t,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.samples_per_iter == 0 || self.sweeps_per_sample == 0 || self.total_iter == 0 {
            return Err(Error::Invalid(
                "schedule needs at least one iteration, sample and sweep".into(),
            ));
        }
        match self.step {
            StepSize::Constant { t } if !(t > 0.0 && t <= 1.0) => {
                Err(Error::Invalid(format!("constant step {t} outside (0, 1]")))
            }
            StepSize::Power { exponent } if !(exponent > 0.0 && exponent <= 1.0) => Err(
                Error::Invalid(format!("step exponent {exponent} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// Bounds of cell `(i, j)` straight from the definition: the largest score
/// among strictly smaller observations and the smallest among strictly larger
/// ones. Missing cells are unconstrained and never constrain others.
pub fn compute_rank_bounds(z: &DMatrix<f64>, data: &Dataset, cell: (usize, usize)) -> (f64, f64) {
    let (i, j) = cell;
    let Some(x) = data.get(i, j) else {
        return (f64::NEG_INFINITY, f64::INFINITY);
    };
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for r in 0..data.n() {
        match data.get(r, j) {
            Some(v) if v < x => lo = lo.max(z[(r, j)]),
            Some(v) if v > x => hi = hi.min(z[(r, j)]),
            _ => {}
        }
    }
    (lo, hi)
}

pub fn rank_bounds(z: &DMatrix<f64>, data: &Dataset) -> RankBounds {
    let (n, p) = (data.n(), data.p());
    let mut lower = DMatrix::zeros(n, p);
    let mut upper = DMatrix::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            let (l, u) = compute_rank_bounds(z, data, (i, j));
            lower[(i, j)] = l;
            upper[(i, j)] = u;
        }
    }
    RankBounds { lower, upper }
}

/// True when `x_ij < x_i'j` implies `z_ij < z_i'j` for every observed pair.
pub fn is_rank_consistent(z: &DMatrix<f64>, data: &Dataset) -> bool {
    (0..data.p()).all(|j| {
        let levels = ColumnLevels::new(data, j);
        levels.members.windows(2).all(|w| {
            let below = w[0].iter().map(|&i| z[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let above = w[1].iter().map(|&i| z[(i, j)]).fold(f64::INFINITY, f64::min);
            below < above
        })
    })
}

/// Uniform draw on the open interval `(0, 1)`.
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `m + σ Φ⁻¹(q)` with `q` uniform between `Φ((l−m)/σ)` and `Φ((u−m)/σ)`
/// at position `uniform`. Intervals in the upper tail are mirrored into the
/// lower tail where `Φ` keeps relative precision. The second value flags an
/// interval whose probability underflowed; the draw is then `clamp(m, l, u)`.
pub fn truncated_normal(m: f64, sd: f64, l: f64, u: f64, uniform: f64) -> (f64, bool) {
    let std_normal = Normal::standard();
    let (a, b) = ((l - m) / sd, (u - m) / sd);
    let (flip, a, b) = if a > 0.0 { (true, -b, -a) } else { (false, a, b) };
    let (fa, fb) = (std_normal.cdf(a), std_normal.cdf(b));
    if !(fb > fa) {
        return (m.clamp(l, u), true);
    }
    let q = fa + uniform * (fb - fa);
    let x = std_normal.inverse_cdf(q);
    let x = if flip { -x } else { x };
    let z = m + sd * x;
    if z.is_nan() {
        return (m.clamp(l, u), true);
    }
    (z.clamp(l, u), false)
}

fn conditional(z: &DMatrix<f64>, omega: &DMatrix<f64>, i: usize, j: usize) -> (f64, f64) {
    let p = omega.nrows();
    let mut acc = 0.0;
    for k in 0..p {
        if k != j {
            acc += omega[(j, k)] * z[(i, k)];
        }
    }
    let w = omega[(j, j)];
    (-acc / w, 1.0 / w.sqrt())
}

/// Draw with an explicit uniform; returns the value and the tail-event flag.
pub fn sample_latent_cell_with_uniform(
    z: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    bounds: (f64, f64),
    cell: (usize, usize),
    uniform: f64,
) -> (f64, bool) {
    let (m, sd) = conditional(z, omega, cell.0, cell.1);
    truncated_normal(m, sd, bounds.0, bounds.1, uniform)
}

/// Draw `z_ij` from its full conditional `Normal(m, 1/ω_jj)` truncated to
/// `bounds`, where `m = −ω_{j,−j} z_{i,−j} / ω_jj`.
pub fn sample_latent_cell<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    bounds: (f64, f64),
    cell: (usize, usize),
    rng: &mut R,
) -> f64 {
    sample_latent_cell_with_uniform(z, omega, bounds, cell, open_uniform(rng)).0
}

/// Observed cells of one column grouped by distinct value, in increasing order.
#[derive(Debug, Clone)]
struct ColumnLevels {
    level_of: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl ColumnLevels {
    fn new(data: &Dataset, j: usize) -> Self {
        let mut obs: Vec<(f64, usize)> = (0..data.n())
            .filter_map(|i| data.get(i, j).map(|v| (v, i)))
            .collect();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut level_of = vec![None; data.n()];
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut last = None;
        for (v, i) in obs {
            if last != Some(v) {
                members.push(Vec::new());
                last = Some(v);
            }
            level_of[i] = Some(members.len() - 1);
            members.last_mut().expect("level pushed").push(i);
        }
        Self { level_of, members }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub resampled: usize,
    pub tail_events: usize,
}

/// Precomputed level structure for repeated sweeps over one dataset.
///
/// Bounds are read from the neighbouring levels only, which equals
/// [`compute_rank_bounds`] whenever the scores are rank consistent; every draw
/// stays inside its bounds, so consistency is preserved by the sweep.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    columns: Vec<ColumnLevels>,
    fixed: Vec<bool>,
}

impl LatentSampler {
    pub fn new(data: &Dataset, fixed_continuous: bool) -> Self {
        let columns = (0..data.p()).map(|j| ColumnLevels::new(data, j)).collect();
        let fixed = data
            .kinds()
            .iter()
            .map(|k| fixed_continuous && *k == VariableKind::Continuous)
            .collect();
        Self { columns, fixed }
    }

    /// One pass over all cells, columns outer and rows inner. Each resampled
    /// cell consumes exactly one `u64` from `rng`; fixed cells consume none.
    pub fn sweep<R: Rng + ?Sized>(
        &self,
        z: &mut DMatrix<f64>,
        omega: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<SweepStats> {
        let (n, p) = z.shape();
        if omega.shape() != (p, p) || self.columns.len() != p {
            return Err(Error::Dimension {
                expected: format!("{p}x{p} precision"),
                found: format!("{}x{}", omega.nrows(), omega.ncols()),
            });
        }
        if (0..p).any(|j| !(omega[(j, j)] > 0.0)) {
            return Err(Error::NotPositiveDefinite("Ω in Gibbs sweep"));
        }
        let mut stats = SweepStats::default();
        for j in 0..p {
            let col = &self.columns[j];
            let levels = col.members.len();
            let extreme = |z: &DMatrix<f64>, r: usize, max: bool| {
                let it = col.members[r].iter().map(|&i| z[(i, j)]);
                if max {
                    it.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    it.fold(f64::INFINITY, f64::min)
                }
            };
            let mut lvl_max: Vec<f64> = (0..levels).map(|r| extreme(z, r, true)).collect();
            let mut lvl_min: Vec<f64> = (0..levels).map(|r| extreme(z, r, false)).collect();
            for i in 0..n {
                let level = col.level_of[i];
                if level.is_some() && self.fixed[j] {
                    continue;
                }
                let bounds = match level {
                    None => (f64::NEG_INFINITY, f64::INFINITY),
                    Some(r) => (
                        if r > 0 { lvl_max[r - 1] } else { f64::NEG_INFINITY },
                        if r + 1 < levels { lvl_min[r + 1] } else { f64::INFINITY },
                    ),
                };
                let (v, tail) =
                    sample_latent_cell_with_uniform(z, omega, bounds, (i, j), open_uniform(rng));
                stats.resampled += 1;
                stats.tail_events += tail as usize;
                let old = z[(i, j)];
                z[(i, j)] = v;
                if let Some(r) = level {
                    if v >= lvl_max[r] {
                        lvl_max[r] = v;
                    } else if old == lvl_max[r] {
                        lvl_max[r] = extreme(z, r, true);
                    }
                    if v <= lvl_min[r] {
                        lvl_min[r] = v;
                    } else if old == lvl_min[r] {
                        lvl_min[r] = extreme(z, r, false);
                    }
                }
            }
        }
        Ok(stats)
    }
}

/// One Gibbs pass over every latent score; see [`LatentSampler::sweep`].
pub fn gibbs_sweep_latent<R: Rng + ?Sized>(
    z: &mut DMatrix<f64>,
    omega: &DMatrix<f64>,
    data: &Dataset,
    rng: &mut R,
) -> Result<SweepStats> {
    if z.shape() != (data.n(), data.p()) {
        return Err(Error::Dimension {
            expected: format!("{}x{} scores", data.n(), data.p()),
            found: format!("{}x{}", z.nrows(), z.ncols()),
        });
    }
    LatentSampler::new(data, false).sweep(z, omega, rng)
}

fn check_step(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("step size {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − t) Q + (t/B) Σ_b Z_bᵀ Z_b`.
pub fn saem_e_step(q_accum: &DMatrix<f64>, samples: &[DMatrix<f64>], t: f64) -> Result<DMatrix<f64>> {
    check_step(t)?;
    if samples.is_empty() {
        return Err(Error::Invalid("SAEM update needs at least one sample".into()));
    }
    let p = q_accum.nrows();
    let mut mean = DMatrix::zeros(p, p);
    for z in samples {
        if z.ncols() != p {
            return Err(Error::Dimension {
                expected: format!("{p} columns"),
                found: z.ncols().to_string(),
            });
        }
        mean += z.tr_mul(z);
    }
    mean /= samples.len() as f64;
    Ok(blend(q_accum, &mean, t))
}

fn blend(q: &DMatrix<f64>, mean: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let mut out = q * (1.0 - t) + mean * t;
    linalg::symmetrize(&mut out);
    out
}

/// Per-column `Φ⁻¹(rank / (n_obs + 1))` with average ranks over ties;
/// missing cells start at 0.
pub fn normal_scores(data: &Dataset) -> DMatrix<f64> {
    let std_normal = Normal::standard();
    let (n, p) = (data.n(), data.p());
    let mut z = DMatrix::zeros(n, p);
    for j in 0..p {
        let levels = ColumnLevels::new(data, j);
        let n_obs: usize = levels.members.iter().map(Vec::len).sum();
        let mut below = 0usize;
        for group in &levels.members {
            let avg_rank = below as f64 + (group.len() as f64 + 1.0) / 2.0;
            let score = std_normal.inverse_cdf(avg_rank / (n_obs as f64 + 1.0));
            for &i in group {
                z[(i, j)] = score;
            }
            below += group.len();
        }
    }
    z
}

/// Copula graphical model by stochastic-approximation ECM.
///
/// Scores start from normal scores (or `init.latent` when it is rank
/// consistent with `data`). Iteration `k` runs `B` samples of
/// `sweeps_per_sample` Gibbs sweeps, blends their cross-products into `Q`
/// with weight `t_k`, and performs one ECM cycle with `Q` as the
/// cross-product. With `t_1 = 1` the first update discards any earlier `Q`.
/// The trace records `(n/2) log|Ω| − ½ tr(QΩ)` plus the log prior, which is
/// not monotone.
pub fn fit_copula<R: Rng + ?Sized>(
    data: &Dataset,
    hp: &Hyperparams,
    schedule: &SaemSchedule,
    rng: &mut R,
    init: Option<&EcmState>,
) -> Result<GraphEstimate> {
    let report = validate(hp, data);
    if !report.is_ok() {
        return Err(Error::Invalid(report.violations.join("; ")));
    }
    schedule.check()?;
    let n = data.n() as f64;
    let mut warnings = Vec::new();
    let mut z = match init.and_then(|s| s.latent.as_ref()) {
        Some(z0) if z0.shape() == (data.n(), data.p()) && is_rank_consistent(z0, data) => z0.clone(),
        Some(_) => {
            warnings.push("warm-start scores do not match the data; using normal scores".into());
            normal_scores(data)
        }
        None => normal_scores(data),
    };
    let mut q = init
        .and_then(|s| s.q_accum.clone())
        .filter(|q| q.shape() == (data.p(), data.p()))
        .unwrap_or_else(|| z.tr_mul(&z));
    let mut state = starting_state(&q, n, hp, init)?;
    let mut sigma = linalg::spd_inverse(&state.omega, "initial Ω")?;
    let sampler = LatentSampler::new(data, schedule.fixed_continuous);
    let objective = |state: &EcmState, q: &DMatrix<f64>| -> Result<f64> {
        Ok(gaussian_term(&state.omega, q, n)? + log_prior(&state.omega, state.pi, &state.tau, hp))
    };
    let mut trace = vec![TracePoint {
        iteration: 0,
        objective: objective(&state, &q)?,
    }];
    let mut tail_events = 0usize;
    let mut empty_reported = false;
    let p = data.p();
    for k in 1..=schedule.total_iter {
        let mut mean = DMatrix::zeros(p, p);
        for _ in 0..schedule.samples_per_iter {
            for _ in 0..schedule.sweeps_per_sample {
                tail_events += sampler.sweep(&mut z, &state.omega, rng)?.tail_events;
            }
            mean += z.tr_mul(&z);
        }
        mean /= schedule.samples_per_iter as f64;
        q = blend(&q, &mean, schedule.step_size(k));
        let empty = ecm_cycle(&mut state, &mut sigma, &q, hp, n)?;
        if !empty.is_empty() && !empty_reported {
            warnings.push(format!("{} empty τ blocks held at the prior mode", empty.len()));
            empty_reported = true;
        }
        trace.push(TracePoint {
            iteration: state.iter,
            objective: objective(&state, &q)?,
        });
    }
    if tail_events > 0 {
        warnings.push(format!(
            "{tail_events} latent draws fell in a numerically empty tail interval"
        ));
    }
    finalize_state(&mut state, hp)?;
    state.q_accum = Some(q);
    state.latent = Some(z);
    let adjacency =
        crate::model::threshold_graph(&state.omega, Some(&state.pstar), ecm::DEFAULT_RULE)?;
    Ok(GraphEstimate {
        state,
        adjacency,
        v0_selected: hp.v0,
        trace,
        converged: true,
        warnings,
    })
}
