//! Graph families and data generators for simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, VariableKind};

/// Correlation decay of the AR(1) family.
pub const AR1_RHO: f64 = 0.7;
/// Off-diagonal weight magnitudes of the random and cluster families.
pub const WEIGHT_RANGE: (f64, f64) = (0.4, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Family {
    Ar1,
    Ar2,
    Random { prob: f64 },
    /// `clusters = None` means `max(2, p / 20)`.
    Cluster { clusters: Option<usize>, prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Margin {
    Gaussian,
    Poisson { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub family: Family,
    pub p: usize,
    pub n: usize,
    pub margin: Margin,
    pub missing_rate: f64,
    pub seed: u64,
}

/// A generated truth: precision, covariance and edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGraph {
    pub omega: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub adjacency: DMatrix<bool>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub graph: SimGraph,
    pub data: Dataset,
}

pub fn default_clusters(p: usize) -> usize {
    (p / 20).max(2)
}

fn adjacency_of(omega: &DMatrix<f64>) -> DMatrix<bool> {
    let p = omega.nrows();
    DMatrix::from_fn(p, p, |j, k| j != k && omega[(j, k)] != 0.0)
}

fn need_p(p: usize, min: usize) -> Result<()> {
    if p < min {
        return Err(Error::Invalid(format!("need p >= {min}, got {p}")));
    }
    Ok(())
}

/// `Σ_jk = 0.7^|j−k|`, whose inverse is tridiagonal.
pub fn gen_ar1(p: usize) -> Result<SimGraph> {
    need_p(p, 2)?;
    let sigma = DMatrix::from_fn(p, p, |j, k| AR1_RHO.powi(j.abs_diff(k) as i32));
    let r2 = AR1_RHO * AR1_RHO;
    let omega = DMatrix::from_fn(p, p, |j, k| {
        if j == k {
            if j == 0 || j == p - 1 {
                1.0 / (1.0 - r2)
            } else {
                (1.0 + r2) / (1.0 - r2)
            }
        } else if j.abs_diff(k) == 1 {
            -AR1_RHO / (1.0 - r2)
        } else {
            0.0
        }
    });
    let adjacency = adjacency_of(&omega);
    Ok(SimGraph {
        omega,
        sigma,
        adjacency,
    })
}

/// Band precision with `1, 0.5, 0.25` on the diagonal and first two bands.
pub fn gen_ar2(p: usize) -> Result<SimGraph> {
    need_p(p, 3)?;
    let omega = DMatrix::from_fn(p, p, |j, k| match j.abs_diff(k) {
        0 => 1.0,
        1 => 0.5,
        2 => 0.25,
        _ => 0.0,
    });
    let sigma = linalg::spd_inverse(&omega, "AR(2) precision")?;
    let adjacency = adjacency_of(&omega);
    Ok(SimGraph {
        omega,
        sigma,
        adjacency,
    })
}

/// Unit diagonal with `weight` on the first off-diagonal band.
pub fn gen_chain(p: usize, weight: f64) -> Result<SimGraph> {
    need_p(p, 2)?;
    let omega = DMatrix::from_fn(p, p, |j, k| match j.abs_diff(k) {
        0 => 1.0,
        1 => weight,
        _ => 0.0,
    });
    let sigma = linalg::spd_inverse(&omega, "chain precision")?;
    let adjacency = adjacency_of(&omega);
    Ok(SimGraph {
        omega,
        sigma,
        adjacency,
    })
}

/// Diagonally dominant precision on a given edge set, rescaled so that
/// `diag(Ω⁻¹) = 1`.
fn weighted_graph<R: Rng + ?Sized>(
    p: usize,
    rng: &mut R,
    mut has_edge: impl FnMut(usize, usize, &mut R) -> bool,
) -> Result<SimGraph> {
    let mut omega = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in (j + 1)..p {
            if has_edge(j, k, rng) {
                let mag = WEIGHT_RANGE.0 + (WEIGHT_RANGE.1 - WEIGHT_RANGE.0) * rng.random::<f64>();
                let w = if rng.random::<bool>() { mag } else { -mag };
                omega[(j, k)] = w;
                omega[(k, j)] = w;
            }
        }
    }
    for j in 0..p {
        let row: f64 = omega.row(j).iter().map(|v| v.abs()).sum();
        omega[(j, j)] = row + 0.1;
    }
    let sigma = linalg::spd_inverse(&omega, "generated precision")?;
    let d = DVector::from_fn(p, |j, _| sigma[(j, j)].sqrt());
    let omega = DMatrix::from_fn(p, p, |j, k| d[j] * omega[(j, k)] * d[k]);
    let sigma = DMatrix::from_fn(p, p, |j, k| sigma[(j, k)] / (d[j] * d[k]));
    let adjacency = adjacency_of(&omega);
    Ok(SimGraph {
        omega,
        sigma,
        adjacency,
    })
}

fn check_prob(prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Invalid(format!("edge probability {prob} outside [0, 1]")));
    }
    Ok(())
}

/// Erdős–Rényi edge set with i.i.d. `Bernoulli(prob)` edges over `j < k`.
pub fn gen_random_graph<R: Rng + ?Sized>(p: usize, prob: f64, rng: &mut R) -> Result<SimGraph> {
    need_p(p, 2)?;
    check_prob(prob)?;
    weighted_graph(p, rng, |_, _, r| r.random::<f64>() < prob)
}

/// Block label (0-based) of each variable for `clusters` contiguous blocks of
/// near-equal size.
pub fn cluster_labels(p: usize, clusters: usize) -> Vec<usize> {
    (0..p).map(|j| j * clusters / p).collect()
}

/// Random graphs within contiguous blocks, no edges across blocks.
pub fn gen_cluster_graph<R: Rng + ?Sized>(
    p: usize,
    clusters: Option<usize>,
    prob: f64,
    rng: &mut R,
) -> Result<SimGraph> {
    need_p(p, 2)?;
    check_prob(prob)?;
    let c = clusters.unwrap_or_else(|| default_clusters(p));
    if c == 0 || c > p {
        return Err(Error::Invalid(format!("cannot split {p} variables into {c} clusters")));
    }
    let labels = cluster_labels(p, c);
    weighted_graph(p, rng, |j, k, r| labels[j] == labels[k] && r.random::<f64>() < prob)
}

pub fn gen_graph<R: Rng + ?Sized>(family: Family, p: usize, rng: &mut R) -> Result<SimGraph> {
    match family {
        Family::Ar1 => gen_ar1(p),
        Family::Ar2 => gen_ar2(p),
        Family::Random { prob } => gen_random_graph(p, prob, rng),
        Family::Cluster { clusters, prob } => gen_cluster_graph(p, clusters, prob, rng),
    }
}

/// Generator for the graph (stream 0) or the data (stream 1) of a spec.
pub fn spec_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smallest `k` with `F(k) ≥ u` for `Poisson(theta)`.
pub fn poisson_quantile(theta: f64, u: f64) -> Result<u64> {
    let dist = Poisson::new(theta).map_err(|e| Error::Invalid(format!("Poisson margin: {e}")))?;
    // Φ rounds to exactly 1 beyond ~8.3σ; keep the quantile finite.
    Ok(dist.inverse_cdf(u.clamp(0.0, 1.0 - 1e-15)))
}

/// `n` rows from `Normal(0, Ω⁻¹)`, margin-transformed and MCAR-masked.
pub fn sample_data(spec: &SimSpec, omega: &DMatrix<f64>) -> Result<Dataset> {
    let p = omega.nrows();
    if omega.ncols() != p || p != spec.p {
        return Err(Error::Dimension {
            expected: format!("{0}x{0} precision", spec.p),
            found: format!("{}x{}", omega.nrows(), omega.ncols()),
        });
    }
    if !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(Error::Invalid(format!(
            "missing rate {} outside [0, 1)",
            spec.missing_rate
        )));
    }
    let sigma = linalg::spd_inverse(omega, "simulation precision")?;
    let chol = linalg::cholesky(&sigma, "simulation covariance")?;
    let l = chol.l();
    let mut rng = spec_rng(spec.seed, 1);
    let n = spec.n;
    let mut values = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for j in 0..p {
            z[j] = rng.sample::<f64, _>(StandardNormal);
        }
        let x = &l * &z;
        values.row_mut(i).copy_from(&x.transpose());
    }
    let kinds = match spec.margin {
        Margin::Gaussian => vec![VariableKind::Continuous; p],
        Margin::Poisson { theta } => {
            let std_normal = Normal::standard();
            for j in 0..p {
                let sd = sigma[(j, j)].sqrt();
                for i in 0..n {
                    let u = std_normal.cdf(values[(i, j)] / sd);
                    values[(i, j)] = poisson_quantile(theta, u)? as f64;
                }
            }
            vec![VariableKind::Ordinal; p]
        }
    };
    let mut missing = DMatrix::from_element(n, p, false);
    if spec.missing_rate > 0.0 {
        for i in 0..n {
            for j in 0..p {
                missing[(i, j)] = rng.random::<f64>() < spec.missing_rate;
            }
        }
    }
    Dataset::new(values, missing, kinds, (1..=p).map(|j| format!("V{j}")).collect())
}

/// Graph from stream 0 of the seed, data from stream 1.
pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    let mut rng = spec_rng(spec.seed, 0);
    let graph = gen_graph(spec.family, spec.p, &mut rng)?;
    let data = sample_data(spec, &graph.omega)?;
    Ok(Simulation { graph, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, p: usize, n: usize) -> SimSpec {
        SimSpec {
            family,
            p,
            n,
            margin: Margin::Gaussian,
            missing_rate: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn ar1_closed_form() {
        let g = gen_ar1(3).unwrap();
        assert!((g.omega[(0, 0)] - 1.0 / 0.51).abs() < 1e-12);
        assert!((g.omega[(1, 1)] - 2.9216).abs() < 1e-4);
        assert!((g.omega[(0, 1)] + 1.3725).abs() < 1e-4);
        assert_eq!(g.omega[(0, 2)], 0.0);
        for p in [2, 3, 10, 50] {
            let g = gen_ar1(p).unwrap();
            let prod = &g.omega * &g.sigma;
            assert!(linalg::max_abs_diff(&prod, &DMatrix::identity(p, p)) < 1e-10);
            assert!(g.sigma.diagonal().iter().all(|&d| d == 1.0));
            assert_eq!(crate::model::edge_count(&g.adjacency), p - 1);
        }
    }

    #[test]
    fn ar2_band() {
        let g = gen_ar2(5).unwrap();
        let row: Vec<f64> = g.omega.row(2).iter().copied().collect();
        assert_eq!(row, vec![0.25, 0.5, 1.0, 0.5, 0.25]);
        for p in [3, 10, 100, 500] {
            let g = gen_ar2(p).unwrap();
            let min_eig = g.omega.clone().symmetric_eigenvalues().min();
            assert!(min_eig > 0.0, "p={p}: {min_eig}");
            for j in 0..p {
                for k in 0..p {
                    if j.abs_diff(k) > 2 {
                        assert_eq!(g.omega[(j, k)], 0.0);
                    }
                }
            }
        }
        assert!(gen_ar2(2).is_err());
    }

    #[test]
    fn random_graph_degenerate_probs() {
        let mut rng = spec_rng(3, 0);
        let empty = gen_random_graph(6, 0.0, &mut rng).unwrap();
        assert_eq!(crate::model::edge_count(&empty.adjacency), 0);
        let full = gen_random_graph(3, 1.0, &mut rng).unwrap();
        assert_eq!(crate::model::edge_count(&full.adjacency), 3);
        assert!(linalg::is_spd(&full.omega));
    }

    #[test]
    fn random_graph_unit_variances_and_weights() {
        let mut rng = spec_rng(11, 0);
        for _ in 0..20 {
            let g = gen_random_graph(15, 0.3, &mut rng).unwrap();
            let sigma = linalg::spd_inverse(&g.omega, "test").unwrap();
            for j in 0..15 {
                assert!((sigma[(j, j)] - 1.0).abs() < 1e-10);
                assert!((g.sigma[(j, j)] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn random_graph_density() {
        let mut rng = spec_rng(5, 0);
        let (mut edges, mut pairs) = (0usize, 0usize);
        for _ in 0..1000 {
            let g = gen_random_graph(50, 0.2, &mut rng).unwrap();
            edges += crate::model::edge_count(&g.adjacency);
            pairs += 50 * 49 / 2;
        }
        let density = edges as f64 / pairs as f64;
        assert!((density - 0.2).abs() < 0.01, "{density}");
    }

    #[test]
    fn cluster_graph_has_no_cross_block_edges() {
        let mut rng = spec_rng(9, 0);
        let g = gen_cluster_graph(45, None, 0.5, &mut rng).unwrap();
        let labels = cluster_labels(45, default_clusters(45));
        assert_eq!(default_clusters(45), 2);
        assert_eq!(default_clusters(100), 5);
        for j in 0..45 {
            for k in 0..45 {
                if labels[j] != labels[k] {
                    assert!(!g.adjacency[(j, k)]);
                }
            }
        }
        assert!(crate::model::edge_count(&g.adjacency) > 0);
    }

    #[test]
    fn poisson_quantile_examples() {
        assert_eq!(poisson_quantile(2.0, 0.5).unwrap(), 2);
        assert_eq!(poisson_quantile(2.0, 0.0).unwrap(), 0);
        // Compare with an explicit CDF scan.
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        let mut pmf = (-2.0f64).exp();
        for k in 0..30 {
            acc += pmf;
            cdf.push(acc);
            pmf *= 2.0 / (k + 1) as f64;
        }
        for &u in &[0.01, 0.1, 0.2, 0.4, 0.6, 0.9, 0.99, 0.999] {
            let expected = cdf.iter().position(|&f| f >= u).unwrap() as u64;
            assert_eq!(poisson_quantile(2.0, u).unwrap(), expected, "u={u}");
        }
        assert!(poisson_quantile(2.0, 1.0).unwrap() < 100);
    }

    #[test]
    fn gaussian_sample_covariance_converges() {
        let g = gen_ar1(5).unwrap();
        let s = spec(Family::Ar1, 5, 100_000);
        let data = sample_data(&s, &g.omega).unwrap();
        let cov = data.values().transpose() * data.values() / 100_000.0;
        assert!(linalg::max_abs_diff(&cov, &g.sigma) < 0.02);
    }

    #[test]
    fn missing_rate_is_respected() {
        let g = gen_ar1(10).unwrap();
        let mut s = spec(Family::Ar1, 10, 1000);
        s.missing_rate = 0.5;
        let data = sample_data(&s, &g.omega).unwrap();
        assert!((data.observed_fraction() - 0.5).abs() < 0.02);
    }

    #[test]
    fn poisson_margins_are_counts() {
        let mut s = spec(Family::Ar1, 4, 200);
        s.margin = Margin::Poisson { theta: 2.0 };
        let sim = simulate(&s).unwrap();
        assert!(sim.data.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        assert!(sim.data.kinds().iter().all(|k| *k == VariableKind::Ordinal));
        let mean = sim.data.values().mean();
        assert!((mean - 2.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let mut s = spec(Family::Random { prob: 0.2 }, 8, 50);
        s.missing_rate = 0.1;
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.graph, b.graph);
        s.seed += 1;
        assert_ne!(simulate(&s).unwrap().data, a.data);
    }
}
