//! JSON shapes written by the subcommands.

use emgs::{DMatrix, GraphEstimate, GlassoFit};
use serde_json::{json, Value};

/// `{rows, cols, values}` with `values` row-major.
pub fn matrix<T: Copy + Into<Value>>(m: &DMatrix<T>) -> Value {
    let values: Vec<Vec<Value>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].into()).collect())
        .collect();
    json!({ "rows": m.nrows(), "cols": m.ncols(), "values": values })
}

pub fn nested<T: Copy>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn graph_fit(fit: &GraphEstimate, adjacency: &DMatrix<bool>, names: &[String]) -> Value {
    let trace: Vec<Value> = fit
        .trace
        .iter()
        .map(|t| json!([t.iteration, t.objective]))
        .collect();
    json!({
        "column_names": names,
        "omega": matrix(fit.omega()),
        "pstar": matrix(fit.pstar()),
        "adjacency": matrix(adjacency),
        "edges": emgs::model::edge_count(adjacency),
        "pi": fit.state.pi,
        "tau": matrix(&fit.state.tau),
        "v0": fit.v0_selected,
        "iterations": fit.iterations(),
        "converged": fit.converged,
        "warnings": fit.warnings,
        "trace": trace,
    })
}

pub fn glasso_fit(fit: &GlassoFit, adjacency: &DMatrix<bool>, names: &[String]) -> Value {
    json!({
        "column_names": names,
        "omega": matrix(&fit.omega),
        "pstar": Value::Null,
        "adjacency": matrix(adjacency),
        "edges": emgs::model::edge_count(adjacency),
        "rho": fit.rho,
        "kkt_residual": fit.kkt_residual,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "warnings": if fit.converged { Vec::<String>::new() } else { vec![format!("did not converge within {} sweeps", fit.iterations)] },
    })
}

/// Reads a `{rows, cols, values}` matrix or a plain nested array.
pub fn read_matrix(v: &Value) -> Option<DMatrix<f64>> {
    let rows = v.get("values").unwrap_or(v).as_array()?;
    let n = rows.len();
    let p = rows.first()?.as_array()?.len();
    let mut m = DMatrix::zeros(n, p);
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array()?;
        if row.len() != p {
            return None;
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = match x {
                Value::Bool(b) => f64::from(u8::from(*b)),
                other => other.as_f64()?,
            };
        }
    }
    Some(m)
}
