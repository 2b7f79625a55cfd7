//! Fixtures shared by the benchmarks.

use emgs::model::center_columns;
use emgs::simulate::{simulate, Family, Margin, SimSpec};
use emgs::Dataset;

/// Centered Gaussian AR1 sample.
pub fn ar1_data(p: usize, n: usize, seed: u64) -> Dataset {
    let spec = SimSpec {
        family: Family::Ar1,
        p,
        n,
        margin: Margin::Gaussian,
        missing_rate: 0.0,
        seed,
    };
    center_columns(&simulate(&spec).expect("valid spec").data).expect("centering")
}

/// Poisson-margin AR1 sample for the copula sampler.
pub fn ar1_counts(p: usize, n: usize, seed: u64) -> (Dataset, emgs::DMatrix<f64>) {
    let spec = SimSpec {
        family: Family::Ar1,
        p,
        n,
        margin: Margin::Poisson { theta: 2.0 },
        missing_rate: 0.0,
        seed,
    };
    let sim = simulate(&spec).expect("valid spec");
    (sim.data, sim.graph.omega)
}
