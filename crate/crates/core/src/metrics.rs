//! Estimation-error and graph-recovery metrics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            expected: format!("{:?}", b.shape()),
            found: format!("{:?}", a.shape()),
        });
    }
    Ok(())
}

pub fn frobenius_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_dims(est, truth)?;
    Ok((est - truth).norm())
}

/// Largest singular value of `est − truth`, by power iteration on `ΔᵀΔ`.
pub fn spectral_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_dims(est, truth)?;
    let delta = est - truth;
    Ok(spectral_norm(&delta))
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    const REL_TOL: f64 = 1e-8;
    const MAX_ITER: usize = 100_000;
    let gram = m.transpose() * m;
    let start = (0..gram.ncols())
        .max_by(|&a, &b| gram.column(a).norm().total_cmp(&gram.column(b).norm()));
    let Some(start) = start else { return 0.0 };
    let col_norm = gram.column(start).norm();
    if col_norm == 0.0 {
        return 0.0;
    }
    // Column of the Gram matrix plus a small dense component, so the start is
    // not orthogonal to the leading eigenvector.
    let mut v: DVector<f64> =
        gram.column(start).into_owned() + DVector::from_element(gram.ncols(), 1e-3 * col_norm);
    v /= v.norm();
    let mut eig = 0.0;
    for _ in 0..MAX_ITER {
        let w = &gram * &v;
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - eig).abs() <= REL_TOL * next {
            eig = next;
            break;
        }
        eig = next;
    }
    eig.sqrt()
}

/// Area under the ROC curve; tied scores count one half (trapezoidal rule).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: format!("{} labels", scores.len()),
            found: labels.len().to_string(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    // Rank-sum form: average ranks over tie groups.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC of `|ω̂_jk|` (over `j < k`) against the true edge set.
pub fn precision_auc(est: &DMatrix<f64>, truth: &DMatrix<bool>) -> Result<f64> {
    let p = est.nrows();
    if truth.shape() != est.shape() {
        return Err(Error::Dimension {
            expected: format!("{:?}", est.shape()),
            found: format!("{:?}", truth.shape()),
        });
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for j in 0..p {
        for k in (j + 1)..p {
            scores.push(est[(j, k)].abs());
            labels.push(truth[(j, k)]);
        }
    }
    roc_auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn edge_counts(est: &DMatrix<bool>, truth: &DMatrix<bool>) -> EdgeCounts {
    let p = est.nrows();
    let mut c = EdgeCounts { tp: 0, fp: 0, fn_: 0 };
    for j in 0..p {
        for k in (j + 1)..p {
            match (est[(j, k)], truth[(j, k)]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    c
}

/// `2TP / (2TP + FP + FN)` over unordered pairs; 1 when both graphs are empty.
pub fn f1_score(est: &DMatrix<bool>, truth: &DMatrix<bool>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::Dimension {
            expected: format!("{:?}", truth.shape()),
            found: format!("{:?}", est.shape()),
        });
    }
    let c = edge_counts(est, truth);
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    })
}
