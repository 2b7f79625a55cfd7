//! Shared domain types: the observation matrix with its missingness mask,
//! prior hyperparameters, iteration state, fitted estimates and the rules used
//! to turn a precision matrix into a graph.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value stored under a masked cell. Never read as data.
pub const MISSING_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Ordinal,
}

/// An `n × p` observation matrix with a per-cell missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    missing: DMatrix<bool>,
    kinds: Vec<VariableKind>,
    column_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        mut values: DMatrix<f64>,
        missing: DMatrix<bool>,
        kinds: Vec<VariableKind>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if missing.shape() != (n, p) {
            return Err(Error::Dimension {
                expected: format!("mask {n}x{p}"),
                found: format!("{}x{}", missing.nrows(), missing.ncols()),
            });
        }
        if kinds.len() != p || column_names.len() != p {
            return Err(Error::Dimension {
                expected: format!("{p} column kinds and names"),
                found: format!("{} kinds, {} names", kinds.len(), column_names.len()),
            });
        }
        if n < 2 || p < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 rows and 2 columns, got {n}x{p}"
            )));
        }
        for (v, &m) in values.iter_mut().zip(missing.iter()) {
            if m {
                *v = MISSING_SENTINEL;
            } else if !v.is_finite() {
                return Err(Error::NonFinite("observed data"));
            }
        }
        Ok(Self {
            values,
            missing,
            kinds,
            column_names,
        })
    }

    /// Fully observed continuous data with generated column names `V1..Vp`.
    pub fn from_complete(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        Self::new(
            values,
            DMatrix::from_element(n, p, false),
            vec![VariableKind::Continuous; p],
            (1..=p).map(|j| format!("V{j}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    /// Raw value matrix; masked cells hold [`MISSING_SENTINEL`].
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn missing(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn kinds(&self) -> &[VariableKind] {
        &self.kinds
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing[(i, j)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (!self.missing[(i, j)]).then(|| self.values[(i, j)])
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn observed_fraction(&self) -> f64 {
        let hidden = self.missing.iter().filter(|&&m| m).count();
        1.0 - hidden as f64 / (self.n() * self.p()) as f64
    }

    pub fn observed_in_column(&self, j: usize) -> usize {
        self.missing.column(j).iter().filter(|&&m| !m).count()
    }

    pub fn with_kinds(mut self, kinds: Vec<VariableKind>) -> Result<Self> {
        if kinds.len() != self.p() {
            return Err(Error::Dimension {
                expected: format!("{} kinds", self.p()),
                found: kinds.len().to_string(),
            });
        }
        self.kinds = kinds;
        Ok(self)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::Dimension {
                expected: format!("{} names", self.p()),
                found: names.len().to_string(),
            });
        }
        self.column_names = names;
        Ok(self)
    }

    /// Same values with an additional set of cells hidden.
    pub fn with_hidden(&self, hide: &DMatrix<bool>) -> Result<Self> {
        let missing = self.missing.zip_map(hide, |a, b| a || b);
        Self::new(
            self.values.clone(),
            missing,
            self.kinds.clone(),
            self.column_names.clone(),
        )
    }

    /// Subset of rows, in the given order.
    pub fn rows(&self, idx: &[usize]) -> Result<Self> {
        let p = self.p();
        let values = DMatrix::from_fn(idx.len(), p, |r, c| self.values[(idx[r], c)]);
        let missing = DMatrix::from_fn(idx.len(), p, |r, c| self.missing[(idx[r], c)]);
        Self::new(
            values,
            missing,
            self.kinds.clone(),
            self.column_names.clone(),
        )
    }

    /// `XᵀX` over observed cells, with masked cells contributing zero.
    pub fn zero_filled_crossprod(&self) -> DMatrix<f64> {
        self.values.transpose() * &self.values
    }
}

/// Variable groups for the block-rescaled prior: `labels[j] ∈ 1..=count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStructure {
    pub labels: Vec<usize>,
    pub count: usize,
}

impl GroupStructure {
    pub fn new(labels: Vec<usize>) -> Self {
        let count = labels.iter().copied().max().unwrap_or(0);
        Self { labels, count }
    }

    /// Zero-based group of variable `j`.
    pub fn group_of(&self, j: usize) -> usize {
        self.labels[j] - 1
    }
}

/// How `Ω⁽⁰⁾` is built when no warm start is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitStrategy {
    /// `(S/n + (λ/n) I)⁻¹`, the ridge-regularised inverse of the sample
    /// second-moment matrix.
    Ridge,
    /// `diag(n / (s_jj + λ))`, the diagonal posterior mode.
    Diagonal,
    /// Graphical lasso solution at the given penalty.
    Glasso { rho: f64 },
}

/// Spike-and-slab prior hyperparameters and the ECM stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Spike standard deviation.
    pub v0: f64,
    /// Slab standard deviation.
    pub v1: f64,
    /// Rate of the exponential prior on the diagonal.
    pub lambda: f64,
    /// Beta(a, b) prior on the edge inclusion probability.
    pub a: f64,
    pub b: f64,
    pub groups: Option<GroupStructure>,
    /// Gamma(a_tau, b_tau) prior on the block rescaling parameters.
    pub a_tau: f64,
    pub b_tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub init: InitStrategy,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            v0: 0.05,
            v1: 100.0,
            lambda: 1.0,
            a: 1.0,
            b: 1.0,
            groups: None,
            a_tau: 2.0,
            b_tau: 1.0,
            max_iter: 1000,
            tol: 1e-4,
            init: InitStrategy::Ridge,
        }
    }
}

impl Hyperparams {
    pub fn with_v0(&self, v0: f64) -> Self {
        Self { v0, ..self.clone() }
    }

    /// Number of τ groups; 1 when the prior is exchangeable.
    pub fn n_groups(&self) -> usize {
        self.groups.as_ref().map_or(1, |g| g.count.max(1))
    }

    /// Zero-based group of variable `j` (always 0 without groups).
    pub fn group_of(&self, j: usize) -> usize {
        self.groups.as_ref().map_or(0, |g| g.group_of(j))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(hp: &Hyperparams, data: &Dataset) -> ValidationReport {
    let mut v = Vec::new();
    let p = data.p();
    if !(hp.v0 > 0.0) {
        v.push("v0 must be positive".to_string());
    }
    if !(hp.v1 > hp.v0) {
        v.push("v1 must exceed v0".to_string());
    }
    if !(hp.lambda > 0.0) {
        v.push("lambda must be positive".to_string());
    }
    if !(hp.a > 0.0 && hp.b > 0.0) {
        v.push("beta prior parameters a and b must be positive".to_string());
    }
    let pairs = (p * (p - 1) / 2) as f64;
    if !(hp.a + hp.b + pairs - 2.0 > 0.0) {
        v.push("a + b + p(p-1)/2 - 2 must be positive".to_string());
    }
    if !(hp.tol > 0.0) {
        v.push("tol must be positive".to_string());
    }
    if hp.max_iter == 0 {
        v.push("max_iter must be at least 1".to_string());
    }
    if let InitStrategy::Glasso { rho } = hp.init {
        if !(rho >= 0.0) {
            v.push("glasso initialisation penalty must be non-negative".to_string());
        }
    }
    if let Some(groups) = &hp.groups {
        if groups.labels.len() != p {
            v.push(format!(
                "group labels cover {} variables but data has {p}",
                groups.labels.len()
            ));
        }
        for (j, &g) in groups.labels.iter().enumerate() {
            if g == 0 || g > groups.count {
                v.push(format!(
                    "group index {g} of column {} out of range 1..={}",
                    j + 1,
                    groups.count
                ));
            }
        }
        if !(hp.a_tau > 1.0) {
            v.push("a_tau must exceed 1 when groups are used".to_string());
        }
        if !(hp.b_tau > 0.0) {
            v.push("b_tau must be positive".to_string());
        }
    }
    if data.n() < 2 {
        v.push(format!("need at least 2 rows, got {}", data.n()));
    }
    for j in 0..p {
        if data.observed_in_column(j) == 0 {
            v.push(format!(
                "column {} ({}) fully missing",
                j + 1,
                data.column_names()[j]
            ));
        }
    }
    ValidationReport { violations: v }
}

/// Subtracts the observed-cell mean from every continuous column.
pub fn center_columns(data: &Dataset) -> Result<Dataset> {
    transform_columns(data, false)
}

/// Centers and rescales every continuous column to unit observed variance.
pub fn standardize_columns(data: &Dataset) -> Result<Dataset> {
    transform_columns(data, true)
}

fn transform_columns(data: &Dataset, unit_variance: bool) -> Result<Dataset> {
    let mut values = data.values().clone();
    for j in 0..data.p() {
        if data.kinds()[j] != VariableKind::Continuous {
            continue;
        }
        let observed: Vec<f64> = (0..data.n()).filter_map(|i| data.get(i, j)).collect();
        if observed.is_empty() {
            return Err(Error::Invalid(format!(
                "column {} has no observed cells",
                j + 1
            )));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let scale = if unit_variance {
            let var =
                observed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / observed.len() as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        } else {
            1.0
        };
        for i in 0..data.n() {
            if !data.is_missing(i, j) {
                values[(i, j)] = (values[(i, j)] - mean) / scale;
            }
        }
    }
    Dataset::new(
        values,
        data.missing().clone(),
        data.kinds().to_vec(),
        data.column_names().to_vec(),
    )
}

/// Rule used to read a graph off a fitted precision matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    /// Edge when `|ω_jk| > t`.
    AbsThreshold(f64),
    /// The `k` largest non-zero `|ω_jk|`.
    TopK(usize),
    /// Edge when `p*_jk > q`.
    PstarThreshold(f64),
}

/// Symmetric boolean adjacency (zero diagonal) selected by `rule`.
///
/// `pstar` is required for [`ThresholdRule::PstarThreshold`] and ignored
/// otherwise. `TopK` ranks by `|ω_jk|` over `j < k`; equal magnitudes keep the
/// lexicographically smaller `(j, k)` first.
pub fn threshold_graph(
    omega: &DMatrix<f64>,
    pstar: Option<&DMatrix<f64>>,
    rule: ThresholdRule,
) -> Result<DMatrix<bool>> {
    let p = omega.nrows();
    if !omega.is_square() {
        return Err(Error::Invalid("omega must be square".into()));
    }
    let mut adj = DMatrix::from_element(p, p, false);
    let mut set = |j: usize, k: usize| {
        adj[(j, k)] = true;
        adj[(k, j)] = true;
    };
    match rule {
        ThresholdRule::AbsThreshold(t) => {
            for j in 0..p {
                for k in (j + 1)..p {
                    if omega[(j, k)].abs() > t {
                        set(j, k);
                    }
                }
            }
        }
        ThresholdRule::PstarThreshold(q) => {
            let ps = pstar.ok_or_else(|| {
                Error::Invalid("p* threshold requires the inclusion probabilities".into())
            })?;
            for j in 0..p {
                for k in (j + 1)..p {
                    if ps[(j, k)] > q {
                        set(j, k);
                    }
                }
            }
        }
        ThresholdRule::TopK(k) => {
            let total = p * (p - 1) / 2;
            if k > total {
                return Err(Error::Invalid(format!(
                    "top-k of {k} edges requested but only {total} pairs exist"
                )));
            }
            let mut ranked: Vec<(usize, usize, f64)> = Vec::with_capacity(total);
            for j in 0..p {
                for c in (j + 1)..p {
                    let m = omega[(j, c)].abs();
                    if m > 0.0 {
                        ranked.push((j, c, m));
                    }
                }
            }
            // Stable sort keeps lexicographic order among equal magnitudes.
            ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
            for &(j, c, _) in ranked.iter().take(k) {
                set(j, c);
            }
        }
    }
    Ok(adj)
}

pub fn edge_count(adj: &DMatrix<bool>) -> usize {
    let p = adj.nrows();
    (0..p)
        .map(|j| ((j + 1)..p).filter(|&k| adj[(j, k)]).count())
        .sum()
}

/// Internal iteration state of the ECM engine; also serves as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmState {
    pub omega: DMatrix<f64>,
    pub pi: f64,
    pub pstar: DMatrix<f64>,
    pub dstar: DMatrix<f64>,
    /// `G × G` block rescaling parameters (`1 × 1` of ones when exchangeable).
    pub tau: DMatrix<f64>,
    /// Stochastic-approximation estimate of `E[ZᵀZ]` (copula fits only).
    pub q_accum: Option<DMatrix<f64>>,
    /// Latent Gaussian scores carried between copula fits.
    pub latent: Option<DMatrix<f64>>,
    pub iter: usize,
}

impl EcmState {
    pub fn new(omega: DMatrix<f64>, pi: f64, n_groups: usize) -> Self {
        let p = omega.nrows();
        Self {
            omega,
            pi,
            pstar: DMatrix::zeros(p, p),
            dstar: DMatrix::zeros(p, p),
            tau: DMatrix::from_element(n_groups, n_groups, 1.0),
            q_accum: None,
            latent: None,
            iter: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.omega.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
}

/// A fitted graph: final state, selected graph and the iteration trace.
#[derive(Debug, Clone)]
pub struct GraphEstimate {
    pub state: EcmState,
    pub adjacency: DMatrix<bool>,
    pub v0_selected: f64,
    pub trace: Vec<TracePoint>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl GraphEstimate {
    pub fn omega(&self) -> &DMatrix<f64> {
        &self.state.omega
    }

    pub fn pstar(&self) -> &DMatrix<f64> {
        &self.state.pstar
    }

    pub fn iterations(&self) -> usize {
        self.state.iter
    }

    /// Adjacency under a different rule, without refitting.
    pub fn rethreshold(&self, rule: ThresholdRule) -> Result<DMatrix<bool>> {
        threshold_graph(&self.state.omega, Some(&self.state.pstar), rule)
    }
}
