mod args;
mod output;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use emgs::copula::SaemSchedule;
use emgs::io::{read_dataset_path, write_dataset};
use emgs::metrics::{f1_score, frobenius_error, precision_auc, spectral_error};
use emgs::model::{
    center_columns, edge_count, standardize_columns, threshold_graph, GroupStructure,
    InitStrategy, ThresholdRule, VariableKind,
};
use emgs::select::{
    cv_select, cv_select_copula, cv_select_glasso, fit_copula_path, fit_path, glasso_path,
    glasso_rho_grid, impute, impute_score, CvOptions, GridSpec, ImputeMethod,
};
use emgs::simulate::{simulate, Family, Margin, SimSpec};
use emgs::{DMatrix, Dataset, GlassoOptions, Hyperparams};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use args::*;

/// Exit 2 for bad input or configuration, 1 for numerical failure.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<emgs::Error> for Failure {
    fn from(e: emgs::Error) -> Self {
        match e {
            emgs::Error::NotPositiveDefinite(_) | emgs::Error::NonFinite(_) => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Validation(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(&a),
        Command::Fit(a) => run_fit(&a),
        Command::Path(a) => run_path(&a, None),
        Command::Cv(a) => run_path(&a.path, Some((a.folds, a.jobs))),
        Command::Impute(a) => run_impute(&a),
        Command::Evaluate(a) => run_evaluate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_json(value: &Value, out: Option<&Path>) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            writeln!(f, "{text}")?;
            f.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn elapsed(start: Instant, omit: bool) -> Value {
    if omit {
        Value::Null
    } else {
        json!(start.elapsed().as_secs_f64())
    }
}

fn run_simulate(a: &SimulateArgs) -> Outcome<()> {
    let family = match a.family {
        FamilyArg::Ar1 => Family::Ar1,
        FamilyArg::Ar2 => Family::Ar2,
        FamilyArg::Random => Family::Random { prob: a.prob },
        FamilyArg::Cluster => Family::Cluster {
            clusters: a.clusters,
            prob: a.prob,
        },
    };
    let margin = match a.margin {
        MarginArg::Gaussian => Margin::Gaussian,
        MarginArg::Poisson => Margin::Poisson { theta: a.theta },
    };
    let spec = SimSpec {
        family,
        p: a.p,
        n: a.n,
        margin,
        missing_rate: a.missing_rate,
        seed: a.seed,
    };
    let sim = simulate(&spec)?;
    write_dataset(&sim.data, BufWriter::new(File::create(&a.out_data)?))?;
    let truth = json!({
        "omega": output::nested(&sim.graph.omega),
        "adjacency": output::nested(&sim.graph.adjacency),
        "spec": spec,
        "seed": a.seed,
    });
    write_json(&truth, Some(&a.out_truth))
}

fn parse_threshold(s: &str) -> Outcome<ThresholdRule> {
    let bad = || Failure::Validation(format!("threshold `{s}` is not pstar:<t>, abs:<t> or topk:<k>"));
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    Ok(match kind {
        "pstar" => ThresholdRule::PstarThreshold(value.parse().map_err(|_| bad())?),
        "abs" => ThresholdRule::AbsThreshold(value.parse().map_err(|_| bad())?),
        "topk" => ThresholdRule::TopK(value.parse().map_err(|_| bad())?),
        _ => return Err(bad()),
    })
}

fn read_groups(path: &Path, names: &[String]) -> Outcome<GroupStructure> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut labels: Vec<Option<usize>> = vec![None; names.len()];
    for record in rdr.records() {
        let record = record?;
        if record.len() != 2 {
            return invalid("groups file needs two columns: variable,group");
        }
        let name = &record[0];
        let Some(j) = names.iter().position(|c| c == name) else {
            return invalid(format!("groups file references unknown column `{name}`"));
        };
        let g: usize = record[1]
            .parse()
            .map_err(|_| Failure::Validation(format!("group of `{name}` is not a positive integer")))?;
        labels[j] = Some(g);
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(j, g)| g.ok_or_else(|| Failure::Validation(format!("column `{}` has no group", names[j]))))
        .collect::<Outcome<Vec<_>>>()?;
    Ok(GroupStructure::new(labels))
}

fn hyperparams(m: &ModelArgs, v0: f64, names: &[String]) -> Outcome<Hyperparams> {
    let groups = m.groups.as_deref().map(|p| read_groups(p, names)).transpose()?;
    Ok(Hyperparams {
        v0,
        v1: m.v1,
        lambda: m.lambda,
        a: m.a,
        b: m.b,
        groups,
        a_tau: m.a_tau,
        b_tau: m.b_tau,
        max_iter: m.max_iter,
        tol: m.tol,
        init: match m.init {
            InitArg::Ridge => InitStrategy::Ridge,
            InitArg::Diagonal => InitStrategy::Diagonal,
            InitArg::Glasso => InitStrategy::Glasso { rho: m.init_rho },
        },
    })
}

fn schedule(m: &ModelArgs) -> SaemSchedule {
    SaemSchedule {
        samples_per_iter: m.saem_samples,
        total_iter: m.saem_iter,
        sweeps_per_sample: m.saem_sweeps,
        fixed_continuous: m.fixed_continuous,
        ..SaemSchedule::default()
    }
}

fn glasso_options(m: &ModelArgs) -> GlassoOptions {
    GlassoOptions {
        penalize_diagonal: m.penalize_diagonal,
        ..GlassoOptions::default()
    }
}

/// Data as seen by the chosen method: copula fits keep the raw values, the
/// Gaussian methods treat every column as continuous and apply `preprocess`.
fn load(m: &ModelArgs) -> Outcome<Dataset> {
    let raw = read_dataset_path(&m.data)?;
    if m.method == MethodArg::EmgsCopula {
        return Ok(raw);
    }
    let p = raw.p();
    let data = raw.with_kinds(vec![VariableKind::Continuous; p])?;
    Ok(match m.preprocess {
        Preprocess::Center => center_columns(&data)?,
        Preprocess::Standardize => standardize_columns(&data)?,
        Preprocess::None => data,
    })
}

fn graph_rule(m: &ModelArgs) -> Outcome<ThresholdRule> {
    let rule = parse_threshold(&m.threshold)?;
    // Glasso has no inclusion probabilities; its graph is the support.
    Ok(match (m.method, rule) {
        (MethodArg::Glasso, ThresholdRule::PstarThreshold(_)) => ThresholdRule::AbsThreshold(0.0),
        _ => rule,
    })
}

fn run_fit(a: &FitArgs) -> Outcome<()> {
    let start = Instant::now();
    let m = &a.model;
    let data = load(m)?;
    let names = data.column_names().to_vec();
    let rule = graph_rule(m)?;
    let (fit, path) = match m.method {
        MethodArg::Glasso => {
            let gp = glasso_path(&data, &[a.rho], &glasso_options(m))?;
            let fit = gp.selected_fit();
            let adj = threshold_graph(&fit.omega, None, rule)?;
            (output::glasso_fit(fit, &adj, &names), Value::Null)
        }
        MethodArg::Emgs | MethodArg::EmgsCopula => {
            let hp = hyperparams(m, a.v0, &names)?;
            let path = if m.method == MethodArg::Emgs {
                fit_path(&data, &hp, &[a.v0])?
            } else {
                fit_copula_path(&data, &hp, &[a.v0], &schedule(m), m.seed)?
            };
            let fit = path.selected_fit();
            let adj = fit.rethreshold(rule)?;
            (output::graph_fit(fit, &adj, &names), Value::Null)
        }
    };
    let result = json!({
        "command": "fit",
        "config": a,
        "seed": m.seed,
        "grid": Value::Null,
        "wall_clock_seconds": elapsed(start, m.omit_timing),
        "selection": Value::Null,
        "fit": fit,
        "path": path,
        "metrics": Value::Null,
    });
    write_json(&result, m.out.as_deref())
}

/// One grid point of a path: parameter value, Ω and (EMGS only) p*.
type PathRow = (f64, DMatrix<f64>, Option<DMatrix<f64>>);

fn write_path_csv(path: &Path, rows: &[PathRow], param: &str) -> Outcome<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([param, "j", "k", "omega", "pstar"])?;
    for (value, omega, pstar) in rows {
        let p = omega.nrows();
        for j in 0..p {
            for k in (j + 1)..p {
                let ps = pstar.as_ref().map(|m| m[(j, k)].to_string()).unwrap_or_default();
                w.write_record([
                    value.to_string(),
                    (j + 1).to_string(),
                    (k + 1).to_string(),
                    omega[(j, k)].to_string(),
                    ps,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn run_path(a: &PathArgs, cv: Option<(usize, usize)>) -> Outcome<()> {
    let start = Instant::now();
    let m = &a.model;
    let data = load(m)?;
    let names = data.column_names().to_vec();
    let rule = graph_rule(m)?;
    let cv_opts = cv.map(|(folds, jobs)| CvOptions {
        folds,
        seed: m.seed,
        jobs,
    });
    let command = if cv.is_some() { "cv" } else { "path" };
    let (grid, param, fit, summary, rows, scores, selected) = match m.method {
        MethodArg::Glasso => {
            let grid = match &a.grid {
                Some(g) => GridSpec::parse(g)?.values()?,
                None => {
                    if data.has_missing() {
                        return invalid("graphical lasso needs complete data");
                    }
                    glasso_rho_grid(&(data.zero_filled_crossprod() / data.n() as f64), 40, 0.01)?
                }
            };
            let opts = glasso_options(m);
            let gp = match &cv_opts {
                Some(c) => cv_select_glasso(&data, &grid, &opts, c)?,
                None => glasso_path(&data, &grid, &opts)?,
            };
            let fit = gp.selected_fit();
            let adj = threshold_graph(&fit.omega, None, rule)?;
            let summary: Vec<Value> = gp
                .fits
                .iter()
                .map(|f| json!({"rho": f.rho, "iterations": f.iterations, "converged": f.converged, "kkt_residual": f.kkt_residual}))
                .collect();
            let rows = gp.fits.iter().map(|f| (f.rho, f.omega.clone(), None)).collect::<Vec<_>>();
            (grid, "rho", output::glasso_fit(fit, &adj, &names), summary, rows, gp.cv_scores.clone(), gp.selected)
        }
        MethodArg::Emgs | MethodArg::EmgsCopula => {
            let grid = GridSpec::parse(a.grid.as_deref().unwrap_or("0.01:1:40:log"))?.values()?;
            let hp = hyperparams(m, grid[0], &names)?;
            let path = match (m.method, &cv_opts) {
                (MethodArg::Emgs, Some(c)) => cv_select(&data, &hp, &grid, c)?,
                (MethodArg::Emgs, None) => fit_path(&data, &hp, &grid)?,
                (_, Some(c)) => cv_select_copula(&data, &hp, &grid, &schedule(m), c)?,
                (_, None) => fit_copula_path(&data, &hp, &grid, &schedule(m), m.seed)?,
            };
            let fit = path.selected_fit();
            let adj = fit.rethreshold(rule)?;
            let summary: Vec<Value> = path
                .fits
                .iter()
                .zip(&grid)
                .map(|(f, v0)| {
                    json!({"v0": v0, "iterations": f.iterations(), "converged": f.converged, "edges": edge_count(&f.adjacency)})
                })
                .collect();
            let rows = path
                .fits
                .iter()
                .zip(&grid)
                .map(|(f, &v0)| (v0, f.omega().clone(), Some(f.pstar().clone())))
                .collect::<Vec<_>>();
            (grid, "v0", output::graph_fit(fit, &adj, &names), summary, rows, path.cv_scores.clone(), path.selected)
        }
    };
    if let Some(csv_path) = &a.path_csv {
        write_path_csv(csv_path, &rows, param)?;
    }
    let result = json!({
        "command": command,
        "config": a,
        "folds": cv.map(|c| c.0),
        "seed": m.seed,
        "grid": grid,
        "wall_clock_seconds": elapsed(start, m.omit_timing),
        "selection": {
            "parameter": param,
            "value": grid[selected],
            "index": selected,
            "cv_scores": scores,
        },
        "fit": fit,
        "path": summary,
        "metrics": Value::Null,
    });
    write_json(&result, m.out.as_deref())
}

fn run_impute(a: &ImputeArgs) -> Outcome<()> {
    let start = Instant::now();
    let raw = read_dataset_path(&a.data)?;
    let p = raw.p();
    let data = raw.clone().with_kinds(vec![VariableKind::Continuous; p])?;
    let method = match a.method {
        ImputeArg::Emgs => ImputeMethod::EmgsCv {
            hp: Hyperparams::default(),
            grid: GridSpec::parse(&a.grid)?.values()?,
            cv: CvOptions {
                folds: a.folds,
                seed: a.seed,
                jobs: a.jobs,
            },
        },
        ImputeArg::Empirical => ImputeMethod::Empirical,
        ImputeArg::ColumnMean => ImputeMethod::ColumnMean,
    };
    let mut report = json!({
        "command": "impute",
        "config": a,
        "seed": a.seed,
        "missing_cells": data.missing().iter().filter(|&&m| m).count(),
    });
    let completed = match a.hide_fraction {
        Some(frac) => {
            if !(frac > 0.0 && frac < 1.0) {
                return invalid(format!("hide fraction {frac} outside (0, 1)"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mask = DMatrix::from_fn(data.n(), p, |i, j| {
                let u: f64 = rng.random();
                !data.is_missing(i, j) && u < frac
            });
            let mse = impute_score(&data, &mask, &method)?;
            report["hidden_cells"] = json!(mask.iter().filter(|&&m| m).count());
            report["mse"] = json!(mse);
            impute(&data.with_hidden(&mask)?, &method)?
        }
        None => impute(&data, &method)?,
    };
    if let Some(out) = &a.out {
        let filled = Dataset::new(
            completed,
            DMatrix::from_element(data.n(), p, false),
            raw.kinds().to_vec(),
            raw.column_names().to_vec(),
        )?;
        write_dataset(&filled, BufWriter::new(File::create(out)?))?;
    }
    report["wall_clock_seconds"] = elapsed(start, a.omit_timing);
    write_json(&report, a.report.as_deref())
}

fn run_evaluate(a: &EvaluateArgs) -> Outcome<()> {
    let result: Value = serde_json::from_reader(File::open(&a.result)?)?;
    let truth: Value = serde_json::from_reader(File::open(&a.truth)?)?;
    let bad = |what: &str| Failure::Validation(format!("cannot read {what}"));
    let omega = output::read_matrix(&result["fit"]["omega"]).ok_or_else(|| bad("fit.omega in result"))?;
    let est_adj = output::read_matrix(&result["fit"]["adjacency"]).ok_or_else(|| bad("fit.adjacency in result"))?;
    let true_omega = output::read_matrix(&truth["omega"]).ok_or_else(|| bad("omega in truth"))?;
    let true_adj = output::read_matrix(&truth["adjacency"]).ok_or_else(|| bad("adjacency in truth"))?;
    if omega.shape() != true_omega.shape() || est_adj.shape() != true_adj.shape() {
        return invalid("result and truth dimensions differ");
    }
    let true_adj = true_adj.map(|x| x != 0.0);
    let est_adj = est_adj.map(|x| x != 0.0);
    let k = edge_count(&true_adj);
    let top = threshold_graph(&omega, None, ThresholdRule::TopK(k))?;
    let auc = precision_auc(&omega, &true_adj).ok();
    let metrics = json!({
        "frobenius_error": frobenius_error(&omega, &true_omega)?,
        "spectral_error": spectral_error(&omega, &true_omega)?,
        "auc": auc,
        "f1_topk": f1_score(&top, &true_adj)?,
        "f1": f1_score(&est_adj, &true_adj)?,
        "true_edges": k,
        "estimated_edges": edge_count(&est_adj),
    });
    let out = json!({
        "command": "evaluate",
        "config": a,
        "result_command": result["command"],
        "metrics": metrics,
    });
    write_json(&out, a.out.as_deref())
}
