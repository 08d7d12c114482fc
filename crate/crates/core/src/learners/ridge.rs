//! Ridge regression: cross-validated over a penalty grid via one
//! eigendecomposition per training set, and the partially penalized variant
//! with a fixed penalty and an unpenalized column block.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::moments::{Moments, Shift, Standardized};
use super::{
    inner_fold_ids, inner_seed, FitContext, FittedLearner, FittedModel, LearnerError,
    LearnerKind, PartialRidgeParams, Result, RidgeParams,
};
use crate::design::DesignMatrix;
use crate::linalg::spd_solve;

struct Eig {
    free: Vec<usize>,
    v: DMatrix<f64>,
    ev: DVector<f64>,
    vtc: DVector<f64>,
    p: usize,
}

impl Eig {
    fn new(st: &Standardized) -> Self {
        let free = st.free_indices();
        let k = free.len();
        let g = DMatrix::from_fn(k, k, |a, b| st.g[(free[a], free[b])]);
        let c = DVector::from_fn(k, |a, _| st.c[free[a]]);
        let e = SymmetricEigen::new(g);
        let vtc = e.eigenvectors.transpose() * &c;
        Self {
            free,
            v: e.eigenvectors,
            ev: e.eigenvalues.map(|l| l.max(0.0)),
            vtc,
            p: st.c.len(),
        }
    }

    /// Standardized solution of `(G + λI)β = c`.
    fn beta(&self, lambda: f64) -> DVector<f64> {
        let w = DVector::from_fn(self.ev.len(), |i, _| self.vtc[i] / (self.ev[i] + lambda));
        let bf = &self.v * w;
        let mut b = DVector::zeros(self.p);
        for (a, &j) in self.free.iter().enumerate() {
            b[j] = bf[a];
        }
        b
    }
}

pub(crate) fn fit_ridge_cv(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &RidgeParams,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    let p = d.ncols();
    let shift = Shift::compute(&d.x, y, rows);
    let grid = &params.lambdas;
    let mut idx = 0usize;
    let mut cv_errors = Vec::new();
    let total = if grid.len() > 1 {
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
        let total = Moments::sum(&fm, p);
        let mut errs = vec![0.0; grid.len()];
        for f in &fm {
            let sf = total.minus(f).standardize();
            let eig = Eig::new(&sf);
            for (i, &l) in grid.iter().enumerate() {
                let (bs, b0) = sf.unscale(&eig.beta(l));
                errs[i] += f.sse(&bs, b0);
            }
        }
        errs.iter_mut().for_each(|e| *e /= total.n as f64);
        for i in 1..errs.len() {
            if errs[i] < errs[idx] {
                idx = i;
            }
        }
        cv_errors = errs;
        total
    } else {
        Moments::accumulate(&d.x, y, rows, &shift)
    };
    let st = total.standardize();
    let beta = Eig::new(&st).beta(grid[idx]);
    let model = st.to_linear(&d.names, &shift, &beta, vec![true; p], grid[idx]);
    let mut f = FittedLearner::new(LearnerKind::RidgeCv, FittedModel::Linear(model), rows.len());
    f.lambda = Some(grid[idx]);
    f.cv_errors = cv_errors;
    Ok(f)
}

pub(crate) fn fit_partial_ridge(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    params: &PartialRidgeParams,
) -> Result<FittedLearner> {
    let p = d.ncols();
    let mut penalized = vec![true; p];
    for name in &params.unpenalized {
        let j = d
            .col_index(name)
            .ok_or_else(|| LearnerError::UnknownColumn(name.clone()))?;
        penalized[j] = false;
    }
    let shift = Shift::compute(&d.x, y, rows);
    let st = Moments::accumulate(&d.x, y, rows, &shift).standardize();
    let free = st.free_indices();
    let k = free.len();
    let mut beta = DVector::zeros(p);
    if k > 0 {
        let a = DMatrix::from_fn(k, k, |i, j| {
            let v = st.g[(free[i], free[j])];
            if i == j && penalized[free[i]] {
                v + params.lambda
            } else {
                v
            }
        });
        let c = DVector::from_fn(k, |i, _| st.c[free[i]]);
        let b = spd_solve(&a, &c).ok_or_else(|| {
            LearnerError::SingularSystem(
                "unpenalized block is rank-deficient and the penalty cannot regularize it".into(),
            )
        })?;
        for (i, &j) in free.iter().enumerate() {
            beta[j] = b[i];
        }
    }
    let model = st.to_linear(&d.names, &shift, &beta, penalized, params.lambda);
    let mut f = FittedLearner::new(LearnerKind::PartialRidge, FittedModel::Linear(model), rows.len());
    f.lambda = Some(params.lambda);
    Ok(f)
}
