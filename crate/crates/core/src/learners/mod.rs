//! Regression learners behind a single fit/predict contract.
//!
//! Every learner is fitted on a row subset of a [`DesignMatrix`] so that
//! cross-fitting never copies data. Reported coefficients are always on the
//! original column scale.

mod ensemble;
mod lasso;
mod moments;
mod prepredicted;
mod ridge;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossfit::{deal_folds, mix_seed};
use crate::design::{DesignMatrix, RowKey};
use crate::linalg::DeferredQr;

pub use ensemble::nnls;
pub use prepredicted::PredictionTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("EmptyData: no training rows")]
    EmptyData,
    #[error("EmptyGrid: penalty grid is empty")]
    EmptyGrid,
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("SingularSystem: {0}")]
    SingularSystem(String),
    #[error("UnknownColumn: {0}")]
    UnknownColumn(String),
    #[error("ColumnMismatch: model fitted on {expected} columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("MissingPrediction: variable={variable} unit={unit} time={time} lead={lead}")]
    MissingPrediction {
        variable: String,
        unit: String,
        time: String,
        lead: u32,
    },
    #[error("InvalidPredictions: {0}")]
    InvalidPredictions(String),
}

pub type Result<T> = std::result::Result<T, LearnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Ols,
    Mean,
    RidgeCv,
    LassoCv,
    PostLasso,
    PartialRidge,
    Bucket,
    Stacking,
    PrePredicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsParams {
    pub intercept: bool,
}

impl Default for OlsParams {
    fn default() -> Self {
        Self { intercept: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoParams {
    /// Explicit penalty grid; when `None` a path is generated from `λ_max`.
    pub lambdas: Option<Vec<f64>>,
    pub n_lambdas: usize,
    pub lambda_min_ratio: f64,
    pub cv_folds: usize,
    /// Stop when the largest coefficient update, on the standardized scale
    /// and in units of sd(y), falls below this.
    pub tol: f64,
    /// Limit on coordinate-descent sweeps per penalty.
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for LassoParams {
    fn default() -> Self {
        Self {
            lambdas: None,
            n_lambdas: 100,
            lambda_min_ratio: 1e-4,
            cv_folds: 5,
            tol: 1e-4,
            max_iter: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeParams {
    pub lambdas: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for RidgeParams {
    fn default() -> Self {
        Self {
            lambdas: log_grid(1e4, 1e-6, 100),
            cv_folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialRidgeParams {
    pub lambda: f64,
    pub unpenalized: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EnsembleParams {
    pub learners: Vec<Learner>,
    pub cv_folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Learner {
    Ols(OlsParams),
    /// Intercept-only model.
    Mean,
    RidgeCv(RidgeParams),
    LassoCv(LassoParams),
    PostLasso(LassoParams),
    PartialRidge(PartialRidgeParams),
    Bucket(EnsembleParams),
    Stacking(EnsembleParams),
    PrePredicted(Arc<PredictionTable>),
}

/// Per-fit context: the name of the target variable (used by lookups) and a
/// stream id that decorrelates the inner CV seeds of different fits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitContext<'a> {
    pub target: &'a str,
    pub stream: u64,
}

/// Linear predictor `intercept + Σ coef_j x_j` on the original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Training means and standard deviations of each column.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Columns dropped as linearly dependent (OLS kinds) or constant.
    pub dropped: Vec<bool>,
    pub penalized: Vec<bool>,
    /// Penalty on the standardized scale; 0 for unpenalized fits.
    pub penalty: f64,
}

impl LinearModel {
    fn predict_rows(&self, x: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
        let nz: Vec<usize> = (0..self.coef.len()).filter(|&j| self.coef[j] != 0.0).collect();
        rows.iter()
            .map(|&r| {
                let mut s = self.intercept;
                for &j in &nz {
                    s += self.coef[j] * x[(r, j)];
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FittedModel {
    Linear(LinearModel),
    Ensemble {
        members: Vec<FittedLearner>,
        weights: Vec<f64>,
    },
    Lookup {
        variable: String,
        #[serde(skip)]
        table: Option<Arc<PredictionTable>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedLearner {
    pub kind: LearnerKind,
    pub model: FittedModel,
    /// Chosen penalty (CV kinds) on the standardized scale.
    pub lambda: Option<f64>,
    pub converged: bool,
    pub n_train: usize,
    pub train_rmse: f64,
    pub train_r2: f64,
    /// Mean CV squared error per grid point or per sub-learner.
    pub cv_errors: Vec<f64>,
    /// Winning sub-learner of a bucket.
    pub selected: Option<usize>,
}

pub fn log_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Inner CV fold of each training row. Rows are grouped by unit when there
/// are at least `k` units, otherwise assigned individually.
pub fn inner_fold_ids(keys: &[RowKey], rows: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut units: Vec<u32> = rows.iter().map(|&r| keys[r].unit).collect();
    units.sort_unstable();
    units.dedup();
    if units.len() >= k {
        let folds = deal_folds(units.len(), k, seed);
        rows.iter()
            .map(|&r| folds[units.binary_search(&keys[r].unit).expect("present")])
            .collect()
    } else {
        deal_folds(rows.len(), k, seed)
    }
}

fn check_folds(k: usize) -> Result<()> {
    if k < 2 {
        return Err(LearnerError::InvalidParameter(format!(
            "cv_folds must be at least 2, got {k}"
        )));
    }
    Ok(())
}

impl Learner {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Ols(_) => LearnerKind::Ols,
            Learner::Mean => LearnerKind::Mean,
            Learner::RidgeCv(_) => LearnerKind::RidgeCv,
            Learner::LassoCv(_) => LearnerKind::LassoCv,
            Learner::PostLasso(_) => LearnerKind::PostLasso,
            Learner::PartialRidge(_) => LearnerKind::PartialRidge,
            Learner::Bucket(_) => LearnerKind::Bucket,
            Learner::Stacking(_) => LearnerKind::Stacking,
            Learner::PrePredicted(_) => LearnerKind::PrePredicted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Learner::Ols(_) | Learner::Mean | Learner::PrePredicted(_) => Ok(()),
            Learner::RidgeCv(p) => {
                if p.lambdas.is_empty() {
                    return Err(LearnerError::EmptyGrid);
                }
                if let Some(l) = p.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                    return Err(LearnerError::InvalidParameter(format!(
                        "ridge penalties must be positive, got {l}"
                    )));
                }
                check_folds(p.cv_folds)
            }
            Learner::LassoCv(p) | Learner::PostLasso(p) => {
                if let Some(ls) = &p.lambdas {
                    if ls.is_empty() {
                        return Err(LearnerError::EmptyGrid);
                    }
                    if let Some(l) = ls.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                        return Err(LearnerError::InvalidParameter(format!(
                            "lasso penalties must be nonnegative, got {l}"
                        )));
                    }
                } else if p.n_lambdas == 0 {
                    return Err(LearnerError::EmptyGrid);
                } else if !(p.lambda_min_ratio > 0.0 && p.lambda_min_ratio < 1.0) {
                    return Err(LearnerError::InvalidParameter(
                        "lambda_min_ratio must lie in (0, 1)".into(),
                    ));
                }
                if !(p.tol > 0.0) {
                    return Err(LearnerError::InvalidParameter("tol must be positive".into()));
                }
                if p.max_iter == 0 {
                    return Err(LearnerError::InvalidParameter("max_iter must be positive".into()));
                }
                check_folds(p.cv_folds)
            }
            Learner::PartialRidge(p) => {
                if !(p.lambda.is_finite() && p.lambda >= 0.0) {
                    return Err(LearnerError::InvalidParameter(format!(
                        "penalty must be nonnegative, got {}",
                        p.lambda
                    )));
                }
                Ok(())
            }
            Learner::Bucket(e) | Learner::Stacking(e) => {
                if e.learners.is_empty() {
                    return Err(LearnerError::InvalidParameter("empty sub-learner list".into()));
                }
                check_folds(e.cv_folds)?;
                e.learners.iter().try_for_each(|l| l.validate())
            }
        }
    }

    /// Fits on all rows of `d`.
    pub fn fit_all(&self, d: &DesignMatrix, y: &[f64]) -> Result<FittedLearner> {
        let rows: Vec<usize> = (0..d.nrows()).collect();
        self.fit(d, y, &rows, &FitContext::default())
    }

    /// Fits on the rows `rows` of `d` (indices into `d` and `y`).
    pub fn fit(
        &self,
        d: &DesignMatrix,
        y: &[f64],
        rows: &[usize],
        ctx: &FitContext,
    ) -> Result<FittedLearner> {
        self.validate()?;
        assert_eq!(d.nrows(), y.len(), "one target per design row");
        if let Learner::PrePredicted(table) = self {
            let mut f = FittedLearner::new(
                LearnerKind::PrePredicted,
                FittedModel::Lookup {
                    variable: ctx.target.to_string(),
                    table: Some(table.clone()),
                },
                rows.len(),
            );
            if let Ok(pred) = f.predict(d, rows) {
                f.set_metrics(&pred, y, rows);
            }
            return Ok(f);
        }
        if rows.is_empty() {
            return Err(LearnerError::EmptyData);
        }
        let mut f = match self {
            Learner::Ols(p) => {
                let cols: Vec<usize> = (0..d.ncols()).collect();
                FittedLearner::new(
                    LearnerKind::Ols,
                    FittedModel::Linear(fit_ols(d, y, rows, &cols, p.intercept)),
                    rows.len(),
                )
            }
            Learner::Mean => FittedLearner::new(
                LearnerKind::Mean,
                FittedModel::Linear(fit_ols(d, y, rows, &[], true)),
                rows.len(),
            ),
            Learner::RidgeCv(p) => ridge::fit_ridge_cv(d, y, rows, p, ctx)?,
            Learner::LassoCv(p) => lasso::fit_lasso_cv(d, y, rows, p, ctx)?,
            Learner::PostLasso(p) => lasso::fit_post_lasso(d, y, rows, p, ctx)?,
            Learner::PartialRidge(p) => ridge::fit_partial_ridge(d, y, rows, p)?,
            Learner::Bucket(e) => ensemble::fit_bucket(d, y, rows, e, ctx)?,
            Learner::Stacking(e) => ensemble::fit_stacking(d, y, rows, e, ctx)?,
            Learner::PrePredicted(_) => unreachable!(),
        };
        let pred = f.predict(d, rows)?;
        f.set_metrics(&pred, y, rows);
        Ok(f)
    }
}

/// OLS on the columns `cols` (others get coefficient 0), optionally with an
/// intercept. Dependent columns are dropped and flagged.
pub(crate) fn fit_ols(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    cols: &[usize],
    intercept: bool,
) -> LinearModel {
    let p = d.ncols();
    let n = rows.len();
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    for j in 0..p {
        let m = rows.iter().map(|&r| d.x[(r, j)]).sum::<f64>() / n as f64;
        let v = rows.iter().map(|&r| (d.x[(r, j)] - m).powi(2)).sum::<f64>() / n as f64;
        means[j] = m;
        if v > 0.0 {
            scales[j] = v.sqrt();
        }
    }
    let shift = |j: usize| if intercept { means[j] } else { 0.0 };
    let ymean = if intercept {
        rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let xs = DMatrix::from_fn(n, cols.len(), |i, c| d.x[(rows[i], cols[c])] - shift(cols[c]));
    let yc: Vec<f64> = rows.iter().map(|&r| y[r] - ymean).collect();
    let mut coef = vec![0.0; p];
    let mut dropped = vec![false; p];
    if !cols.is_empty() {
        let qr = DeferredQr::new(&xs);
        let b = qr.solve(&yc);
        let mask = qr.dropped_mask();
        for (c, &j) in cols.iter().enumerate() {
            coef[j] = b[c];
            dropped[j] = mask[c];
        }
    }
    let b0 = if intercept {
        ymean - (0..p).map(|j| coef[j] * means[j]).sum::<f64>()
    } else {
        0.0
    };
    LinearModel {
        names: d.names.clone(),
        coef,
        intercept: b0,
        means,
        scales,
        dropped,
        penalized: vec![false; p],
        penalty: 0.0,
    }
}

impl FittedLearner {
    fn new(kind: LearnerKind, model: FittedModel, n_train: usize) -> Self {
        Self {
            kind,
            model,
            lambda: None,
            converged: true,
            n_train,
            train_rmse: f64::NAN,
            train_r2: f64::NAN,
            cv_errors: Vec::new(),
            selected: None,
        }
    }

    fn set_metrics(&mut self, pred: &[f64], y: &[f64], rows: &[usize]) {
        let n = rows.len() as f64;
        if rows.is_empty() {
            return;
        }
        let ym = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
        let sse: f64 = rows.iter().zip(pred).map(|(&r, p)| (y[r] - p).powi(2)).sum();
        let sst: f64 = rows.iter().map(|&r| (y[r] - ym).powi(2)).sum();
        self.train_rmse = (sse / n).sqrt();
        self.train_r2 = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
    }

    pub fn predict_all(&self, d: &DesignMatrix) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..d.nrows()).collect();
        self.predict(d, &rows)
    }

    pub fn predict(&self, d: &DesignMatrix, rows: &[usize]) -> Result<Vec<f64>> {
        match &self.model {
            FittedModel::Linear(m) => {
                if m.coef.len() != d.ncols() {
                    return Err(LearnerError::ColumnMismatch {
                        expected: m.coef.len(),
                        found: d.ncols(),
                    });
                }
                Ok(m.predict_rows(&d.x, rows))
            }
            FittedModel::Ensemble { members, weights } => {
                let mut out = vec![0.0; rows.len()];
                for (m, &w) in members.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let p = m.predict(d, rows)?;
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += w * v;
                    }
                }
                Ok(out)
            }
            FittedModel::Lookup { variable, table } => {
                let table = table.as_ref().ok_or_else(|| {
                    LearnerError::InvalidPredictions("prediction table not loaded".into())
                })?;
                rows.iter().map(|&r| table.lookup(variable, d.keys[r])).collect()
            }
        }
    }

    /// Linear representation `(coef, intercept)` when the model is linear or
    /// a weighted combination of linear models.
    pub fn linear(&self) -> Option<(Vec<f64>, f64)> {
        match &self.model {
            FittedModel::Linear(m) => Some((m.coef.clone(), m.intercept)),
            FittedModel::Ensemble { members, weights } => {
                let mut acc: Option<(Vec<f64>, f64)> = None;
                for (m, &w) in members.iter().zip(weights) {
                    let (c, b) = m.linear()?;
                    let a = acc.get_or_insert_with(|| (vec![0.0; c.len()], 0.0));
                    for (x, v) in a.0.iter_mut().zip(&c) {
                        *x += w * v;
                    }
                    a.1 += w * b;
                }
                acc
            }
            FittedModel::Lookup { .. } => None,
        }
    }

    pub fn linear_model(&self) -> Option<&LinearModel> {
        match &self.model {
            FittedModel::Linear(m) => Some(m),
            _ => None,
        }
    }

    /// Named original-scale coefficients of a linear fit.
    pub fn coefficients(&self, names: &[String]) -> Option<Vec<(String, f64)>> {
        let (c, _) = self.linear()?;
        Some(names.iter().cloned().zip(c).collect())
    }

    /// Reattaches a prediction table after deserialization.
    pub fn attach_table(&mut self, t: &Arc<PredictionTable>) {
        match &mut self.model {
            FittedModel::Lookup { table, .. } => *table = Some(t.clone()),
            FittedModel::Ensemble { members, .. } => {
                members.iter_mut().for_each(|m| m.attach_table(t))
            }
            FittedModel::Linear(_) => {}
        }
    }
}

/// Seed of the inner CV split for one fit.
pub(crate) fn inner_seed(seed: u64, ctx: &FitContext) -> u64 {
    mix_seed(seed, ctx.stream)
}

pub fn ols_fit(d: &DesignMatrix, y: &[f64], intercept: bool) -> Result<FittedLearner> {
    Learner::Ols(OlsParams { intercept }).fit_all(d, y)
}

pub fn ridge_cv_fit(d: &DesignMatrix, y: &[f64], params: RidgeParams) -> Result<FittedLearner> {
    Learner::RidgeCv(params).fit_all(d, y)
}

pub fn lasso_cv_fit(d: &DesignMatrix, y: &[f64], params: LassoParams) -> Result<FittedLearner> {
    Learner::LassoCv(params).fit_all(d, y)
}

pub fn post_lasso_fit(d: &DesignMatrix, y: &[f64], params: LassoParams) -> Result<FittedLearner> {
    Learner::PostLasso(params).fit_all(d, y)
}

pub fn partial_ridge_fit(
    d: &DesignMatrix,
    y: &[f64],
    lambda: f64,
    unpenalized: &[&str],
) -> Result<FittedLearner> {
    Learner::PartialRidge(PartialRidgeParams {
        lambda,
        unpenalized: unpenalized.iter().map(|s| s.to_string()).collect(),
    })
    .fit_all(d, y)
}

pub fn bucket_fit(
    d: &DesignMatrix,
    y: &[f64],
    learners: Vec<Learner>,
    cv_folds: usize,
) -> Result<FittedLearner> {
    Learner::Bucket(EnsembleParams {
        learners,
        cv_folds,
        seed: 0,
    })
    .fit_all(d, y)
}

pub fn stacking_fit(
    d: &DesignMatrix,
    y: &[f64],
    learners: Vec<Learner>,
    cv_folds: usize,
) -> Result<FittedLearner> {
    Learner::Stacking(EnsembleParams {
        learners,
        cv_folds,
        seed: 0,
    })
    .fit_all(d, y)
}
