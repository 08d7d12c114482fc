//! Bucket of models and stacking over out-of-fold predictions.

use log::warn;
use nalgebra::DMatrix;

use super::{
    inner_fold_ids, inner_seed, EnsembleParams, FitContext, FittedLearner, FittedModel,
    Learner, LearnerError, LearnerKind, Result,
};
use crate::crossfit::mix_seed;
use crate::design::DesignMatrix;
use crate::linalg::DeferredQr;

fn sub_ctx<'a>(ctx: &FitContext<'a>, learner: usize, fold: u64) -> FitContext<'a> {
    FitContext {
        target: ctx.target,
        stream: mix_seed(ctx.stream, ((learner as u64) << 32) | fold),
    }
}

/// Out-of-fold predictions of `learner`, one per entry of `rows`.
fn out_of_fold(
    learner: &Learner,
    li: usize,
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    ids: &[usize],
    k: usize,
    ctx: &FitContext,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows.len()];
    for f in 0..k {
        let train: Vec<usize> = rows
            .iter()
            .zip(ids)
            .filter(|(_, &i)| i != f)
            .map(|(&r, _)| r)
            .collect();
        let test: Vec<usize> = (0..rows.len()).filter(|&i| ids[i] == f).collect();
        let test_rows: Vec<usize> = test.iter().map(|&i| rows[i]).collect();
        let fitted = learner.fit(d, y, &train, &sub_ctx(ctx, li, f as u64))?;
        let pred = fitted.predict(d, &test_rows)?;
        for (i, p) in test.into_iter().zip(pred) {
            out[i] = p;
        }
    }
    Ok(out)
}

fn oof_matrix(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &EnsembleParams,
    ctx: &FitContext,
) -> Result<Vec<Vec<f64>>> {
    if rows.len() < params.cv_folds {
        return Err(LearnerError::InvalidParameter(format!(
            "{} training rows cannot fill {} CV folds",
            rows.len(),
            params.cv_folds
        )));
    }
    let ids = inner_fold_ids(&d.keys, rows, params.cv_folds, inner_seed(params.seed, ctx));
    params
        .learners
        .iter()
        .enumerate()
        .map(|(li, l)| out_of_fold(l, li, d, y, rows, &ids, params.cv_folds, ctx))
        .collect()
}

fn refit(
    l: &Learner,
    li: usize,
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    ctx: &FitContext,
) -> Result<FittedLearner> {
    l.fit(d, y, rows, &sub_ctx(ctx, li, u32::MAX as u64))
}

pub(crate) fn fit_bucket(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &EnsembleParams,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    let oof = oof_matrix(d, y, rows, params, ctx)?;
    let n = rows.len() as f64;
    let errs: Vec<f64> = oof
        .iter()
        .map(|p| rows.iter().zip(p).map(|(&r, v)| (y[r] - v).powi(2)).sum::<f64>() / n)
        .collect();
    let mut best = 0usize;
    for i in 1..errs.len() {
        if errs[i] < errs[best] {
            best = i;
        }
    }
    let winner = refit(&params.learners[best], best, d, y, rows, ctx)?;
    let mut f = FittedLearner::new(
        LearnerKind::Bucket,
        FittedModel::Ensemble {
            members: vec![winner],
            weights: vec![1.0],
        },
        rows.len(),
    );
    f.cv_errors = errs;
    f.selected = Some(best);
    Ok(f)
}

pub(crate) fn fit_stacking(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &EnsembleParams,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    let oof = oof_matrix(d, y, rows, params, ctx)?;
    let m = oof.len();
    let a = DMatrix::from_fn(rows.len(), m, |i, j| oof[j][i]);
    let b: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
    let raw = nnls(&a, &b);
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        warn!("stacking weights for '{}' are all zero; using equal weights", ctx.target);
        vec![1.0 / m as f64; m]
    };
    let n = rows.len() as f64;
    let cv_errors = oof
        .iter()
        .map(|p| rows.iter().zip(p).map(|(&r, v)| (y[r] - v).powi(2)).sum::<f64>() / n)
        .collect();
    let members = params
        .learners
        .iter()
        .enumerate()
        .map(|(li, l)| refit(l, li, d, y, rows, ctx))
        .collect::<Result<Vec<_>>>()?;
    let mut f = FittedLearner::new(
        LearnerKind::Stacking,
        FittedModel::Ensemble { members, weights },
        rows.len(),
    );
    f.cv_errors = cv_errors;
    Ok(f)
}

/// Nonnegative least squares `min ‖Ax − b‖ s.t. x ≥ 0` (Lawson–Hanson).
pub fn nnls(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let (n, m) = a.shape();
    assert_eq!(n, b.len());
    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    let gradient = |x: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = (0..n)
            .map(|i| b[i] - (0..m).map(|j| a[(i, j)] * x[j]).sum::<f64>())
            .collect();
        (0..m).map(|j| (0..n).map(|i| a[(i, j)] * r[i]).sum()).collect()
    };
    let scale = gradient(&x).iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let solve_passive = |passive: &[bool]| -> Vec<f64> {
        let cols: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(n, cols.len(), |i, c| a[(i, cols[c])]);
        let z = DeferredQr::new(&sub).solve(b);
        let mut s = vec![0.0; m];
        for (c, &j) in cols.iter().enumerate() {
            s[j] = z[c];
        }
        s
    };
    for _ in 0..(3 * m + 10) {
        let w = gradient(&x);
        let cand = (0..m)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).expect("finite").then(j.cmp(&i)));
        let Some(j) = cand else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;
        loop {
            let s = solve_passive(&passive);
            let bad: Vec<usize> = (0..m).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if bad.is_empty() {
                x = s;
                break;
            }
            let alpha = bad
                .iter()
                .map(|&i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..m {
                x[i] += alpha * (s[i] - x[i]);
            }
            for i in 0..m {
                if passive[i] && x[i] <= 1e-15 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            // A dependent column solved to exactly zero would loop forever.
            if !passive[j] {
                break;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_clips_negative_direction() {
        // Unconstrained solution is (1, -1); the constrained one drops the
        // second column.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = [1.0, -1.0, 0.0];
        let x = nnls(&a, &b);
        assert_eq!(x[1], 0.0);
        assert!((x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nnls_interior_solution_matches_ls() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        let b = [1.0, 2.0, 3.0, 4.0];
        let x = nnls(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }
}
