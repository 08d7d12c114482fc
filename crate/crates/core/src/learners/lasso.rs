//! Cross-validated Lasso by cyclic coordinate descent on the standardized
//! Gram matrix, and post-Lasso OLS refits.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::moments::{Moments, Shift, Standardized};
use super::{
    fit_ols, inner_fold_ids, inner_seed, log_grid, FitContext, FittedLearner, FittedModel,
    LassoParams, LearnerError, LearnerKind, LinearModel, Result,
};
use crate::design::DesignMatrix;
use crate::linalg::soft_threshold;

/// Minimizes `½βᵀGβ − cᵀβ + λ‖β‖₁` over the `free` coordinates, starting
/// from (and updating) `beta`, with `q = Gβ` maintained incrementally.
/// A sweep converges when every `√g_jj·|Δβ_j|` is below `tol`.
/// Returns whether that happened within `max_iter` sweeps.
pub(crate) fn coordinate_descent(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    free: &[usize],
    lambda: f64,
    beta: &mut DVector<f64>,
    q: &mut DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> bool {
    let mut sweeps = 0usize;
    let sweep = |idx: &[usize], beta: &mut DVector<f64>, q: &mut DVector<f64>| -> f64 {
        let mut dmax = 0.0f64;
        for &j in idx {
            let gjj = g[(j, j)];
            let z = c[j] - q[j] + gjj * beta[j];
            let new = soft_threshold(z, lambda) / gjj;
            let delta = new - beta[j];
            if delta != 0.0 {
                q.axpy(delta, &g.column(j), 1.0);
                beta[j] = new;
                dmax = dmax.max(gjj.sqrt() * delta.abs());
            }
        }
        dmax
    };
    let mut active: Vec<usize> = Vec::new();
    loop {
        let d = sweep(free, beta, q);
        sweeps += 1;
        if d < tol {
            return true;
        }
        if sweeps >= max_iter {
            return false;
        }
        loop {
            active.clear();
            active.extend(free.iter().copied().filter(|&j| beta[j] != 0.0));
            let d = sweep(&active, beta, q);
            sweeps += 1;
            if d < tol {
                break;
            }
            if sweeps >= max_iter {
                return false;
            }
        }
    }
}

/// Solutions along a descending penalty path with warm starts.
pub(crate) fn lasso_path(
    st: &Standardized,
    lambdas: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<DVector<f64>>, bool) {
    let p = st.c.len();
    let free = st.free_indices();
    let mut beta = DVector::zeros(p);
    let mut q = DVector::zeros(p);
    let mut ok = true;
    let mut out = Vec::with_capacity(lambdas.len());
    // Coefficient updates in units of sd(y), so the criterion is scale free.
    let thresh = if st.yvar > 0.0 { tol * st.yvar.sqrt() } else { tol };
    for &l in lambdas {
        ok &= coordinate_descent(&st.g, &st.c, &free, l, &mut beta, &mut q, thresh, max_iter);
        out.push(beta.clone());
    }
    (out, ok)
}

/// Smallest penalty at which every standardized coefficient is zero.
pub(crate) fn lambda_max(st: &Standardized) -> f64 {
    st.c.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub(crate) struct LassoOutcome {
    pub model: LinearModel,
    pub lambda: f64,
    pub converged: bool,
    pub cv_errors: Vec<f64>,
}

pub(crate) fn lasso_core(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &LassoParams,
    ctx: &FitContext,
) -> Result<LassoOutcome> {
    let p = d.ncols();
    let shift = Shift::compute(&d.x, y, rows);
    let explicit = params.lambdas.as_ref().map(|ls| {
        let mut v = ls.clone();
        v.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        v
    });
    let needs_cv = explicit.as_ref().map_or(params.n_lambdas > 1, |v| v.len() > 1);
    let (total, folds) = if needs_cv {
        if rows.len() < params.cv_folds {
            return Err(LearnerError::InvalidParameter(format!(
                "{} training rows cannot fill {} CV folds",
                rows.len(),
                params.cv_folds
            )));
        }
        let ids = inner_fold_ids(&d.keys, rows, params.cv_folds, inner_seed(params.seed, ctx));
        let fm: Vec<Moments> = (0..params.cv_folds)
            .map(|f| {
                let fr: Vec<usize> = rows
                    .iter()
                    .zip(&ids)
                    .filter(|(_, &i)| i == f)
                    .map(|(&r, _)| r)
                    .collect();
                Moments::accumulate(&d.x, y, &fr, &shift)
            })
            .collect();
        (Moments::sum(&fm, p), fm)
    } else {
        (Moments::accumulate(&d.x, y, rows, &shift), Vec::new())
    };
    let st = total.standardize();
    let grid = match explicit {
        Some(v) => v,
        None => {
            let lm = lambda_max(&st);
            if lm > 0.0 {
                log_grid(lm, lm * params.lambda_min_ratio, params.n_lambdas)
            } else {
                vec![0.0]
            }
        }
    };
    let mut cv_errors = Vec::new();
    let mut idx = 0usize;
    if grid.len() > 1 {
        let mut errs = vec![0.0; grid.len()];
        for fm in &folds {
            let train = total.minus(fm);
            let sf = train.standardize();
            let (betas, _) = lasso_path(&sf, &grid, params.tol, params.max_iter);
            for (i, b) in betas.iter().enumerate() {
                let (bs, b0) = sf.unscale(b);
                errs[i] += fm.sse(&bs, b0);
            }
        }
        let n = total.n as f64;
        errs.iter_mut().for_each(|e| *e /= n);
        for i in 1..errs.len() {
            if errs[i] < errs[idx] {
                idx = i;
            }
        }
        cv_errors = errs;
    }
    let (betas, converged) = lasso_path(&st, &grid[..=idx], params.tol, params.max_iter);
    if !converged {
        warn!(
            "lasso for '{}' did not converge within {} sweeps",
            ctx.target, params.max_iter
        );
    }
    let model = st.to_linear(&d.names, &shift, betas.last().expect("nonempty"), vec![true; p], grid[idx]);
    Ok(LassoOutcome {
        model,
        lambda: grid[idx],
        converged,
        cv_errors,
    })
}

pub(crate) fn fit_lasso_cv(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &LassoParams,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    let o = lasso_core(d, y, rows, params, ctx)?;
    let mut f = FittedLearner::new(LearnerKind::LassoCv, FittedModel::Linear(o.model), rows.len());
    f.lambda = Some(o.lambda);
    f.converged = o.converged;
    f.cv_errors = o.cv_errors;
    Ok(f)
}

pub(crate) fn fit_post_lasso(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &LassoParams,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    let o = lasso_core(d, y, rows, params, ctx)?;
    let support: Vec<usize> = (0..d.ncols()).filter(|&j| o.model.coef[j] != 0.0).collect();
    let model = fit_ols(d, y, rows, &support, true);
    let mut f = FittedLearner::new(LearnerKind::PostLasso, FittedModel::Linear(model), rows.len());
    f.lambda = Some(o.lambda);
    f.converged = o.converged;
    f.cv_errors = o.cv_errors;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_is_zero_at_lambda_max() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.2, 2.0, -0.3, 3.0, 0.9, 4.0, 0.1, 5.0, -1.0]);
        let y = [1.1, 1.9, 3.2, 3.9, 5.1];
        let rows: Vec<usize> = (0..5).collect();
        let shift = Shift::compute(&x, &y, &rows);
        let st = Moments::accumulate(&x, &y, &rows, &shift).standardize();
        let lm = lambda_max(&st);
        let (b, ok) = lasso_path(&st, &[lm, lm * 0.5], 1e-10, 10_000);
        assert!(ok);
        assert!(b[0].iter().all(|v| *v == 0.0));
        assert!(b[1].iter().any(|v| *v != 0.0));
    }
}
