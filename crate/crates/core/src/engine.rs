//! Double ML and its dynamic (multi-lead) extension.
//!
//! For each lead τ and each variable in {outcome} ∪ treatments, a baseline
//! learner is cross-fitted on the features available at the reference date
//! using one shared unit-level fold assignment. The honest residuals of all
//! leads are pooled and the outcome residual is regressed on the columns of
//! the causal design.

use std::collections::{BTreeMap, HashMap};

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossfit::{assign_folds, assign_folds_stratified, crossfit_fit, mix_seed, CrossFitModel, CrossfitError, FoldAssignment};
use crate::data_model::{DataType, PanelDataset};
use crate::featurize::{build_features, scoring_rows, FeatureBuilder, FeaturizeError};
use crate::learners::{FittedLearner, Learner, LearnerError, OlsParams, PartialRidgeParams};
use crate::linalg::{spd_inverse, DeferredQr};
use crate::residuals::ResidualPanel;
use crate::treatments::{
    build_causal_design, model_set, CausalDesign, ColumnKind, ColumnMeta, TreatmentBuilder,
    TreatmentError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("InvalidOptions: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Crossfit(#[from] CrossfitError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Treatment(#[from] TreatmentError),
    #[error("SecondStageRankDeficient: dependent columns {0:?}")]
    SecondStageRankDeficient(Vec<String>),
    #[error("RankDeficient: {0}")]
    RankDeficient(String),
    #[error("SeUnavailableForPenalizedModel: no standard errors for {0}")]
    SeUnavailableForPenalizedModel(String),
    #[error("LeadOutOfRange: outcome time {time} is {lead} periods past the last reference date; fitted leads are {min_lead}..={max_lead}")]
    LeadOutOfRange {
        time: String,
        lead: i64,
        min_lead: usize,
        max_lead: usize,
    },
    #[error("UnknownColumn: '{0}'")]
    UnknownColumn(String),
}

type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeType {
    #[default]
    Classical,
    Hc1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdmlOptions {
    pub min_lead: usize,
    pub max_lead: usize,
    pub k: usize,
    pub seed: u64,
    pub se_type: SeType,
    /// Second-stage intercept.
    pub intercept: bool,
    /// With two or more panel keys, spread the units sharing the first key
    /// over distinct folds.
    #[serde(default = "yes")]
    pub stratify_folds: bool,
}

fn yes() -> bool {
    true
}

impl Default for DdmlOptions {
    fn default() -> Self {
        Self {
            min_lead: 0,
            max_lead: 0,
            k: 5,
            seed: 0,
            se_type: SeType::Classical,
            intercept: true,
            stratify_folds: true,
        }
    }
}

impl DdmlOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_lead > self.max_lead {
            return Err(EngineError::InvalidOptions(format!(
                "min_lead {} exceeds max_lead {}",
                self.min_lead, self.max_lead
            )));
        }
        if self.k < 2 {
            return Err(EngineError::InvalidOptions(format!("K must be at least 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// Model definition: featurization, baseline and causal learners,
/// treatment builders and options.
#[derive(Debug, Clone)]
pub struct DynamicDml {
    pub feature_builders: Vec<FeatureBuilder>,
    pub baseline: Learner,
    pub treatments: Vec<TreatmentBuilder>,
    pub causal: Learner,
    pub options: DdmlOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageMetric {
    pub variable: String,
    pub lead: usize,
    pub n_rows: usize,
    pub n_features: usize,
    pub oof_rmse: f64,
    pub oof_r2: f64,
    pub mean_train_r2: f64,
}

/// Cross-fitted first stage of one (variable, lead).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstStageModel {
    pub variable: String,
    pub lead: usize,
    pub feature_names: Vec<String>,
    pub sub_models: Vec<FittedLearner>,
}

/// Everything needed to forecast without refitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub options: DdmlOptions,
    pub outcome: String,
    pub folds: FoldAssignment,
    pub first_stage: Vec<FirstStageModel>,
    pub columns: Vec<ColumnMeta>,
    pub beta: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone)]
pub struct DmlFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Names covered by `covariance`; all columns for OLS second stages,
    /// unpenalized ones for partially penalized ridge.
    pub se_names: Vec<String>,
    pub covariance: Option<DMatrix<f64>>,
    pub se_type: SeType,
    pub se_approximate: bool,
    pub n_effective: usize,
    pub first_stage: Vec<FirstStageMetric>,
    pub folds: FoldAssignment,
    pub residuals: ResidualPanel,
    pub design: CausalDesign,
    pub causal_model: FittedLearner,
    /// Second-stage residuals, aligned with design rows.
    pub second_stage_residuals: Vec<f64>,
    pub saved: SavedModel,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn stream_of(seed: u64, variable: &str, lead: usize) -> u64 {
    mix_seed(seed, fnv1a(variable) ^ (lead as u64).rotate_left(40))
}

impl DynamicDml {
    /// Single lead of zero: the static Double ML estimator.
    pub fn double_ml(
        feature_builders: Vec<FeatureBuilder>,
        baseline: Learner,
        treatments: Vec<TreatmentBuilder>,
        causal: Learner,
        k: usize,
        seed: u64,
    ) -> Self {
        Self {
            feature_builders,
            baseline,
            treatments,
            causal,
            options: DdmlOptions {
                k,
                seed,
                ..Default::default()
            },
        }
    }

    pub fn fit(&self, ds: &PanelDataset) -> Result<DmlFit> {
        let opts = &self.options;
        opts.validate()?;
        self.baseline.validate()?;
        self.causal.validate()?;
        if matches!(self.causal, Learner::PrePredicted(_)) {
            return Err(EngineError::InvalidOptions(
                "pre-predicted lookups cannot serve as the causal learner".into(),
            ));
        }
        let schema = ds.schema();
        let outcome = schema.outcome().to_string();
        let mut variables = vec![outcome.clone()];
        variables.extend(model_set(&self.treatments, schema)?);

        let units: Vec<u32> = (0..ds.n_units() as u32).collect();
        let folds = if opts.stratify_folds && schema.panel_colnames().len() > 1 {
            let strata: Vec<u32> = (0..ds.n_units()).map(|u| ds.unit_codes(u)[0]).collect();
            assign_folds_stratified(&units, &strata, opts.k, opts.seed)?
        } else {
            assign_folds(&units, opts.k, opts.seed)?
        };
        let leads: Vec<usize> = (opts.min_lead..=opts.max_lead).collect();
        let panels = leads
            .par_iter()
            .map(|&l| build_features(ds, &self.feature_builders, l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let jobs: Vec<(usize, &String)> = (0..leads.len())
            .flat_map(|li| variables.iter().map(move |v| (li, v)))
            .collect();
        let fits = jobs
            .par_iter()
            .map(|&(li, var)| {
                let fp = &panels[li];
                let y = &fp.targets[var];
                let rows: Vec<usize> = (0..fp.nrows()).collect();
                let stream = stream_of(opts.seed, var, leads[li]);
                let m = crossfit_fit(&fp.design, y, &rows, var, &self.baseline, &folds, stream)?;
                let pred = m.predict(&fp.design, &rows)?;
                Ok((m, pred))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut residuals = ResidualPanel::new(ds.n_units(), ds.n_periods());
        let mut metrics = Vec::new();
        let mut first_stage = Vec::new();
        for (&(li, var), (m, pred)) in jobs.iter().zip(fits) {
            let fp = &panels[li];
            let y = &fp.targets[var];
            residuals.insert(
                var,
                leads[li],
                (0..fp.nrows()).map(|i| {
                    let k = fp.design.keys[i];
                    (k.unit as usize, k.time as usize, y[i], pred[i])
                }),
            );
            metrics.push(first_stage_metric(var, leads[li], fp.design.ncols(), y, &pred, &m));
            first_stage.push(FirstStageModel {
                variable: var.clone(),
                lead: leads[li],
                feature_names: fp.design.names.clone(),
                sub_models: m.sub_models,
            });
        }

        let design = build_causal_design(&residuals, &self.treatments, ds, opts.min_lead, opts.max_lead)?;
        let second = second_stage(&design, &self.causal, opts)?;
        info!(
            "second stage: {} rows, {} columns",
            design.z.nrows(),
            design.z.ncols()
        );
        let saved = SavedModel {
            options: opts.clone(),
            outcome,
            folds: folds.clone(),
            first_stage,
            columns: design.meta.clone(),
            beta: second.beta.clone(),
            intercept: second.intercept,
        };
        Ok(DmlFit {
            names: design.z.names.clone(),
            beta: second.beta,
            intercept: second.intercept,
            se_names: second.se_names,
            covariance: second.covariance,
            se_type: opts.se_type,
            se_approximate: second.approximate,
            n_effective: design.z.nrows(),
            first_stage: metrics,
            folds,
            residuals,
            causal_model: second.model,
            second_stage_residuals: second.resid,
            design,
            saved,
        })
    }
}

fn first_stage_metric(
    var: &str,
    lead: usize,
    n_features: usize,
    y: &[f64],
    pred: &[f64],
    m: &CrossFitModel,
) -> FirstStageMetric {
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    let sse: f64 = y.iter().zip(pred).map(|(a, p)| (a - p).powi(2)).sum();
    let sst: f64 = y.iter().map(|a| (a - ym).powi(2)).sum();
    FirstStageMetric {
        variable: var.to_string(),
        lead,
        n_rows: y.len(),
        n_features,
        oof_rmse: (sse / n).sqrt(),
        oof_r2: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        mean_train_r2: m.sub_models.iter().map(|s| s.train_r2).sum::<f64>()
            / m.sub_models.len() as f64,
    }
}

struct SecondStage {
    beta: Vec<f64>,
    intercept: f64,
    se_names: Vec<String>,
    covariance: Option<DMatrix<f64>>,
    approximate: bool,
    model: FittedLearner,
    resid: Vec<f64>,
}

fn centered(z: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return z.clone();
    }
    let mut zc = z.clone();
    for j in 0..z.ncols() {
        let m = z.column(j).iter().sum::<f64>() / z.nrows() as f64;
        zc.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    zc
}

/// Covariance of OLS slope estimates from design `z` and residuals `e`. With
/// an intercept the slopes' block is obtained from the centered design.
pub fn ols_covariance(
    z: &DMatrix<f64>,
    e: &[f64],
    intercept: bool,
    se: SeType,
) -> Result<DMatrix<f64>> {
    let (n, p) = z.shape();
    let dof = n as f64 - p as f64 - if intercept { 1.0 } else { 0.0 };
    if dof <= 0.0 {
        return Err(EngineError::RankDeficient(format!(
            "{n} rows leave no residual degrees of freedom for {p} columns"
        )));
    }
    let zc = centered(z, intercept);
    let qr = DeferredQr::new(&zc);
    if qr.rank() < p {
        return Err(EngineError::RankDeficient("design has dependent columns".into()));
    }
    let inv = qr.xtx_inverse();
    Ok(sandwich(&zc, &inv, e, dof, se))
}

/// `σ̂²·B·ZᵀZ·B` (classical) or `B·ZᵀΩZ·B·n/dof` (HC1), with `B` the bread.
fn sandwich(zc: &DMatrix<f64>, bread: &DMatrix<f64>, e: &[f64], dof: f64, se: SeType) -> DMatrix<f64> {
    let n = zc.nrows();
    let p = zc.ncols();
    let meat = match se {
        SeType::Classical => {
            let s2 = e.iter().map(|v| v * v).sum::<f64>() / dof;
            zc.transpose() * zc * s2
        }
        SeType::Hc1 => {
            let mut m = DMatrix::zeros(p, p);
            for i in 0..n {
                let w = e[i] * e[i];
                for a in 0..p {
                    let za = zc[(i, a)] * w;
                    if za == 0.0 {
                        continue;
                    }
                    for b in 0..p {
                        m[(a, b)] += za * zc[(i, b)];
                    }
                }
            }
            m * (n as f64 / dof)
        }
    };
    let c = bread * meat * bread;
    (&c + c.transpose()) * 0.5
}

fn second_stage(design: &CausalDesign, causal: &Learner, opts: &DdmlOptions) -> Result<SecondStage> {
    let z = &design.z;
    let learner = match causal {
        Learner::Ols(_) => Learner::Ols(OlsParams {
            intercept: opts.intercept,
        }),
        Learner::PartialRidge(p) if p.unpenalized.is_empty() => {
            Learner::PartialRidge(PartialRidgeParams {
                lambda: p.lambda,
                unpenalized: design.unpenalized_names(),
            })
        }
        other => other.clone(),
    };
    let model = learner.fit_all(z, &design.y)?;
    let pred = model.predict_all(z)?;
    let resid: Vec<f64> = design.y.iter().zip(&pred).map(|(a, b)| a - b).collect();
    let (beta, intercept) = model
        .linear()
        .ok_or_else(|| EngineError::InvalidOptions("the causal learner must be linear".into()))?;
    let n = z.nrows();
    let p = z.ncols();
    let mut out = SecondStage {
        beta,
        intercept,
        se_names: Vec::new(),
        covariance: None,
        approximate: false,
        model: model.clone(),
        resid,
    };
    match &learner {
        Learner::Ols(o) => {
            let lm = model.linear_model().expect("linear");
            let dropped: Vec<String> = (0..p)
                .filter(|&j| lm.dropped[j])
                .map(|j| z.names[j].clone())
                .collect();
            if !dropped.is_empty() {
                return Err(EngineError::SecondStageRankDeficient(dropped));
            }
            out.covariance = Some(ols_covariance(&z.x, &out.resid, o.intercept, opts.se_type)?);
            out.se_names = z.names.clone();
        }
        Learner::PartialRidge(pr) => {
            let lm = model.linear_model().expect("linear");
            let zc = centered(&z.x, true);
            let nf = n as f64;
            let mut a = zc.transpose() * &zc;
            for j in 0..p {
                if lm.penalized[j] {
                    a[(j, j)] += nf * pr.lambda * lm.scales[j] * lm.scales[j];
                }
            }
            let dof = nf - p as f64 - 1.0;
            if let (Some(inv), true) = (spd_inverse(&a), dof > 0.0) {
                let full = sandwich(&zc, &inv, &out.resid, dof, opts.se_type);
                let keep: Vec<usize> = (0..p).filter(|&j| !lm.penalized[j]).collect();
                out.covariance = Some(DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
                    full[(keep[a], keep[b])]
                }));
                out.se_names = keep.iter().map(|&j| z.names[j].clone()).collect();
                out.approximate = true;
            } else {
                warn!("partially penalized second stage: covariance unavailable");
            }
        }
        _ => {}
    }
    Ok(out)
}

impl DmlFit {
    pub fn get_coefficients(&self) -> Vec<(String, f64)> {
        self.names.iter().cloned().zip(self.beta.iter().copied()).collect()
    }

    /// Standard errors for the columns covered by the covariance matrix.
    pub fn get_standard_errors(&self) -> Result<Vec<(String, f64)>> {
        let cov = self.covariance.as_ref().ok_or_else(|| {
            EngineError::SeUnavailableForPenalizedModel(format!("{:?} second stage", self.causal_model.kind))
        })?;
        Ok(self
            .se_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), cov[(i, i)].max(0.0).sqrt()))
            .collect())
    }

    pub fn standard_error(&self, name: &str) -> Option<f64> {
        let i = self.se_names.iter().position(|n| n == name)?;
        self.covariance.as_ref().map(|c| c[(i, i)].max(0.0).sqrt())
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.beta[i])
    }
}

/// Planned treatment values keyed by (treatment, unit, outcome period).
pub type TreatmentPlan = HashMap<(String, usize, i64), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub unit: usize,
    pub outcome_time: usize,
    pub lead: usize,
    pub baseline: f64,
    pub adjusted: f64,
}

impl SavedModel {
    fn crossfit(&self, variable: &str, lead: usize) -> Option<CrossFitModel> {
        let f = self
            .first_stage
            .iter()
            .find(|f| f.variable == variable && f.lead == lead)?;
        Some(CrossFitModel {
            sub_models: f.sub_models.clone(),
            folds: self.folds.clone(),
            train_counts: Vec::new(),
        })
    }

    /// Treatment-aware forecasts from the last observed period.
    ///
    /// The baseline is the mean of the cross-fitted outcome sub-models. The
    /// adjustment adds `β̂ · column` where each causal column is rebuilt from
    /// treatment surprises `planned − ĝ`; unplanned treatments have zero
    /// surprise.
    pub fn forecast(
        &self,
        ds: &PanelDataset,
        feature_builders: &[FeatureBuilder],
        treatments: &[TreatmentBuilder],
        plan: &TreatmentPlan,
    ) -> Result<Vec<ForecastRow>> {
        let o = &self.options;
        let t_ref = ds.n_periods() - 1;
        for (_, _, time) in plan.keys() {
            let lead = time - t_ref as i64;
            if lead < o.min_lead as i64 || lead > o.max_lead as i64 {
                return Err(EngineError::LeadOutOfRange {
                    time: if *time >= 0 { ds.time_label(*time as usize) } else { time.to_string() },
                    lead,
                    min_lead: o.min_lead,
                    max_lead: o.max_lead,
                });
            }
        }
        // Baseline forecasts of every first-stage variable at each lead,
        // from reference date t_ref (and earlier dates for shifted lags).
        let mut base: BTreeMap<(String, usize, usize), Vec<Option<f64>>> = BTreeMap::new();
        let mut predict_at = |var: &str, lead: usize, t: usize| -> Result<Vec<Option<f64>>> {
            let key = (var.to_string(), lead, t);
            if let Some(v) = base.get(&key) {
                return Ok(v.clone());
            }
            let mut out = vec![None; ds.n_units()];
            if let Some(m) = self.crossfit(var, lead) {
                let sr = scoring_rows(ds, feature_builders, lead, t)?;
                let rows: Vec<usize> = (0..sr.nrows()).collect();
                let pred = if t == t_ref {
                    m.predict_mean(&sr.design, &rows)?
                } else {
                    m.predict(&sr.design, &rows)?
                };
                for (k, p) in sr.design.keys.iter().zip(pred) {
                    out[k.unit as usize] = Some(p);
                }
            }
            base.insert(key, out.clone());
            Ok(out)
        };
        let realized = |var: &str, unit: usize, time: i64| -> Option<f64> {
            if let Some(v) = plan.get(&(var.to_string(), unit, time)) {
                return Some(*v);
            }
            if time <= t_ref as i64 {
                let col = ds.numeric(var)?;
                return ds.value_at(col, unit, time);
            }
            None
        };
        let mut out = Vec::new();
        for lead in o.min_lead..=o.max_lead {
            let l_hat = predict_at(&self.outcome, lead, t_ref)?;
            for unit in 0..ds.n_units() {
                let Some(baseline) = l_hat[unit] else { continue };
                let mut adj = 0.0;
                for (j, m) in self.columns.iter().enumerate() {
                    if m.tau_y != lead || self.beta[j] == 0.0 {
                        continue;
                    }
                    let t0 = t_ref as i64 - m.ref_shift as i64;
                    if t0 < 0 {
                        continue;
                    }
                    let mut surprise = |u: usize| -> Result<f64> {
                        let g = predict_at(&m.treatment, m.tau_d, t0 as usize)?[u];
                        let d = realized(&m.treatment, u, t0 + m.tau_d as i64);
                        Ok(match (d, g) {
                            (Some(d), Some(g)) => d - g,
                            _ => 0.0,
                        })
                    };
                    let v = match &m.kind {
                        ColumnKind::Main => surprise(unit)?,
                        ColumnKind::Interaction { cell } => {
                            if cell_active(ds, unit, t_ref, cell) {
                                surprise(unit)?
                            } else {
                                0.0
                            }
                        }
                        ColumnKind::Peer { group_col, focal } => {
                            let TreatmentBuilder::Peer(p) = &treatments[m.builder] else {
                                return Err(EngineError::InvalidOptions(
                                    "treatment builders do not match the saved model".into(),
                                ));
                            };
                            let peers = peer_units(ds, unit, group_col, &p.peer_map, focal.as_deref())?;
                            if peers.is_empty() {
                                0.0
                            } else {
                                let mut s = 0.0;
                                for &q in &peers {
                                    s += surprise(q)?;
                                }
                                s / peers.len() as f64
                            }
                        }
                    };
                    adj += self.beta[j] * v;
                }
                out.push(ForecastRow {
                    unit,
                    outcome_time: t_ref + lead,
                    lead,
                    baseline,
                    adjusted: baseline + adj,
                });
            }
        }
        Ok(out)
    }
}

fn cell_active(ds: &PanelDataset, unit: usize, t: usize, cell: &[(String, String)]) -> bool {
    let Some(r) = ds.row_at(unit, t as i64) else {
        return false;
    };
    cell.iter().all(|(col, level)| {
        let def = ds.schema().col(col).expect("validated at fit");
        match def.data_type {
            DataType::Numeric => {
                let v = ds.numeric(col).expect("numeric")[r];
                !v.is_nan() && format!("{}", v as i64) == *level
            }
            _ => {
                let levels = ds.levels(col).expect("categorical");
                let code = match ds.schema().panel_colnames().iter().position(|p| p == col) {
                    Some(pos) => Some(ds.unit_codes(unit)[pos]),
                    None => ds.categorical(col).expect("categorical")[r],
                };
                code.is_some_and(|c| levels[c as usize] == *level)
            }
        }
    })
}

fn peer_units(
    ds: &PanelDataset,
    unit: usize,
    group_col: &str,
    map: &BTreeMap<String, Vec<String>>,
    focal: Option<&str>,
) -> Result<Vec<usize>> {
    let pos = ds
        .schema()
        .panel_colnames()
        .iter()
        .position(|c| c == group_col)
        .ok_or_else(|| EngineError::UnknownColumn(group_col.to_string()))?;
    let key = ds.unit_key(unit);
    if focal.is_some_and(|f| f != key[pos]) {
        return Ok(Vec::new());
    }
    let Some(peers) = map.get(key[pos]) else {
        return Ok(Vec::new());
    };
    Ok(peers
        .iter()
        .filter_map(|p| {
            let mut k = key.clone();
            k[pos] = p.as_str();
            ds.find_unit(&k)
        })
        .collect())
}

impl DmlFit {
    pub fn forecast(
        &self,
        ds: &PanelDataset,
        feature_builders: &[FeatureBuilder],
        treatments: &[TreatmentBuilder],
        plan: &TreatmentPlan,
    ) -> Result<Vec<ForecastRow>> {
        self.saved.forecast(ds, feature_builders, treatments, plan)
    }
}

/// Frisch–Waugh–Lovell check: the coefficients of the treatments from the
/// residual-on-residual regression (after partialling out the confounders
/// and an intercept) and from the full regression. Rows with any missing
/// value are skipped.
pub fn fwl_estimate(ds: &PanelDataset, confounders: &[&str]) -> Result<(Vec<f64>, Vec<f64>)> {
    let schema = ds.schema();
    let col = |c: &str| ds.numeric(c).ok_or_else(|| EngineError::UnknownColumn(c.to_string()));
    let y = col(schema.outcome())?;
    let ds_cols = schema
        .treatments()
        .into_iter()
        .map(col)
        .collect::<Result<Vec<_>>>()?;
    let xs = confounders.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<usize> = (0..ds.n_rows())
        .filter(|&r| {
            !y[r].is_nan()
                && ds_cols.iter().all(|c| !c[r].is_nan())
                && xs.iter().all(|c| !c[r].is_nan())
        })
        .collect();
    let yv: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
    let d = DMatrix::from_fn(rows.len(), ds_cols.len(), |i, j| ds_cols[j][rows[i]]);
    let x = DMatrix::from_fn(rows.len(), xs.len(), |i, j| xs[j][rows[i]]);
    fwl_matrices(&yv, &d, &x)
}

/// [`fwl_estimate`] on explicit matrices.
pub fn fwl_matrices(y: &[f64], d: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let (pd, px) = (d.ncols(), x.ncols());
    if n <= pd + px + 1 {
        return Err(EngineError::RankDeficient(format!(
            "{n} rows for {} coefficients",
            pd + px + 1
        )));
    }
    // Step 1 and 2: residualize Y and each D on [1, X].
    let xi = DMatrix::from_fn(n, px + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let qx = DeferredQr::new(&xi);
    if qx.rank() < px + 1 {
        return Err(EngineError::RankDeficient("confounders are collinear".into()));
    }
    let resid = |v: &[f64]| -> Vec<f64> {
        let b = qx.solve(v);
        (0..n)
            .map(|i| v[i] - (0..=px).map(|j| xi[(i, j)] * b[j]).sum::<f64>())
            .collect()
    };
    let y_t = resid(y);
    let d_t = DMatrix::from_fn(n, pd, |_, _| 0.0);
    let mut d_t = d_t;
    for j in 0..pd {
        let col: Vec<f64> = d.column(j).iter().copied().collect();
        for (i, v) in resid(&col).into_iter().enumerate() {
            d_t[(i, j)] = v;
        }
    }
    // Step 3: regress residual on residual.
    let qd = DeferredQr::new(&d_t);
    if qd.rank() < pd {
        return Err(EngineError::RankDeficient(
            "treatments are collinear given the confounders".into(),
        ));
    }
    let beta = qd.solve(&y_t);
    // Full regression Y on [D, 1, X].
    let full = DMatrix::from_fn(n, pd + px + 1, |i, j| {
        if j < pd {
            d[(i, j)]
        } else {
            xi[(i, j - pd)]
        }
    });
    let qf = DeferredQr::new(&full);
    if qf.rank() < pd + px + 1 {
        return Err(EngineError::RankDeficient("full design is rank-deficient".into()));
    }
    let bf = qf.solve(y);
    Ok((beta, bf[..pd].to_vec()))
}
