//! Post-fit model criticism: treatment correlation matrix, classical VIF,
//! influence statistics of the second stage, first-stage outlier lists and
//! significance/sign checks.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::engine::DmlFit;
use crate::learners::LearnerKind;
use crate::linalg::{spd_inverse, DeferredQr};
use crate::residuals::ResidualPanel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("RankDeficient: second-stage design has dependent columns")]
    RankDeficient,
    #[error("TooFewRows: {n} rows for {p} parameters")]
    TooFewRows { n: usize, p: usize },
}

/// Correlation matrix of the second-stage columns (what the guide calls a
/// "VIF" matrix) plus the classical variance inflation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct VifReport {
    pub names: Vec<String>,
    pub corr: DMatrix<f64>,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub constant: Vec<bool>,
    /// `1 / (1 − R²_j)` from regressing column j on the others; infinite
    /// under exact collinearity, NaN for constant columns.
    pub classical_vif: Vec<f64>,
}

pub fn vif_matrix(z: &DMatrix<f64>, names: &[String]) -> VifReport {
    let (n, p) = z.shape();
    let means: Vec<f64> = (0..p).map(|j| z.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut s = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (z[(i, a)] - means[a]) * (z[(i, b)] - means[b]);
            }
            s[(a, b)] = acc;
            s[(b, a)] = acc;
        }
    }
    let constant: Vec<bool> = (0..p).map(|j| !(s[(j, j)] > 0.0)).collect();
    let corr = DMatrix::from_fn(p, p, |a, b| {
        if a == b {
            1.0
        } else if constant[a] || constant[b] {
            0.0
        } else {
            (s[(a, b)] / (s[(a, a)] * s[(b, b)]).sqrt()).clamp(-1.0, 1.0)
        }
    });
    let live: Vec<usize> = (0..p).filter(|&j| !constant[j]).collect();
    let sub = DMatrix::from_fn(live.len(), live.len(), |a, b| corr[(live[a], live[b])]);
    let mut classical_vif = vec![f64::NAN; p];
    match spd_inverse(&sub) {
        Some(inv) => {
            for (a, &j) in live.iter().enumerate() {
                classical_vif[j] = inv[(a, a)];
            }
        }
        None => {
            for &j in &live {
                classical_vif[j] = f64::INFINITY;
            }
        }
    }
    VifReport {
        names: names.to_vec(),
        corr,
        constant,
        classical_vif,
    }
}

/// Hat values, Cook's distance and DFBETA of an OLS fit of `y` on `z`
/// (plus an intercept when requested).
#[derive(Debug, Clone, PartialEq)]
pub struct Influence {
    pub leverage: Vec<f64>,
    pub cooks_d: Vec<f64>,
    /// `β̂ − β̂(−i)` for the columns of `z` (intercept excluded), n × p.
    pub dfbeta: DMatrix<f64>,
    /// Rows with leverage one; their Cook's D is +∞ and DFBETA NaN.
    pub leverage_one: Vec<usize>,
}

pub fn influence(z: &DMatrix<f64>, y: &[f64], intercept: bool) -> Result<Influence, DiagnosticsError> {
    let (n, p) = z.shape();
    let off = usize::from(intercept);
    let k = p + off;
    if n <= k {
        return Err(DiagnosticsError::TooFewRows { n, p: k });
    }
    let x = DMatrix::from_fn(n, k, |i, j| if j < off { 1.0 } else { z[(i, j - off)] });
    let qr = DeferredQr::new(&x);
    if qr.rank() < k {
        return Err(DiagnosticsError::RankDeficient);
    }
    let beta = qr.solve(y);
    let inv = qr.xtx_inverse();
    let e: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..k).map(|j| x[(i, j)] * beta[j]).sum::<f64>())
        .collect();
    let sse = e.iter().map(|v| v * v).sum::<f64>();
    let syy = y.iter().map(|v| v * v).sum::<f64>();
    // A fit exact up to rounding has no influential rows.
    let s2 = if sse <= 1e-20 * syy { 0.0 } else { sse / (n - k) as f64 };
    let mut leverage = vec![0.0; n];
    let mut cooks_d = vec![0.0; n];
    let mut dfbeta = DMatrix::zeros(n, p);
    let mut leverage_one = Vec::new();
    for i in 0..n {
        let xi = x.row(i).transpose();
        let ax = &inv * &xi;
        let h = xi.dot(&ax);
        leverage[i] = h;
        if h >= 1.0 - 1e-10 {
            leverage_one.push(i);
            cooks_d[i] = f64::INFINITY;
            for j in 0..p {
                dfbeta[(i, j)] = f64::NAN;
            }
            continue;
        }
        let one_m = 1.0 - h;
        cooks_d[i] = if s2 > 0.0 {
            e[i] * e[i] * h / (k as f64 * s2 * one_m * one_m)
        } else {
            0.0
        };
        for j in 0..p {
            dfbeta[(i, j)] = ax[j + off] * e[i] / one_m;
        }
    }
    Ok(Influence {
        leverage,
        cooks_d,
        dfbeta,
        leverage_one,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRow {
    pub variable: String,
    pub lead: usize,
    pub unit: usize,
    pub time: usize,
    pub actual: f64,
    pub predicted: f64,
}

impl OutlierRow {
    pub fn residual(&self) -> f64 {
        self.actual - self.predicted
    }
}

/// The `k` largest absolute first-stage residuals per (variable, lead);
/// ties keep (unit, time) order.
pub fn outlier_report(res: &ResidualPanel, k: usize) -> Vec<OutlierRow> {
    let mut out = Vec::new();
    for (var, lead) in res.series_ids() {
        let mut rows = res.rows(&var, lead);
        // Stable sort preserves (unit, time) order among equal magnitudes.
        rows.sort_by(|a, b| {
            let ra = (a.2 - a.3).abs();
            let rb = (b.2 - b.3).abs();
            rb.partial_cmp(&ra).unwrap_or(Ordering::Equal)
        });
        out.extend(rows.into_iter().take(k).map(|(u, t, a, p)| OutlierRow {
            variable: var.clone(),
            lead,
            unit: u,
            time: t,
            actual: a,
            predicted: p,
        }));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignFlag {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    pub expected: Option<Sign>,
    /// Significant with the opposite of the expected sign.
    pub violated: bool,
}

/// Coefficients with |t| above `threshold`, each checked against an
/// expected sign when one is declared.
pub fn sign_flags(fit: &DmlFit, expected: &[(String, Sign)], threshold: f64) -> Vec<SignFlag> {
    let Ok(se) = fit.get_standard_errors() else {
        return Vec::new();
    };
    se.into_iter()
        .filter_map(|(name, s)| {
            let beta = fit.coefficient(&name)?;
            let t = beta / s;
            if !(t.abs() > threshold) {
                return None;
            }
            let exp = expected.iter().find(|(n, _)| *n == name).map(|(_, s)| *s);
            let violated = match exp {
                Some(Sign::Positive) => beta < 0.0,
                Some(Sign::Negative) => beta > 0.0,
                None => false,
            };
            Some(SignFlag {
                name,
                beta,
                se: s,
                t,
                expected: exp,
                violated,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub vif: VifReport,
    /// Only for OLS second stages.
    pub influence: Option<Influence>,
    pub outliers: Vec<OutlierRow>,
    pub sign_flags: Vec<SignFlag>,
}

pub fn diagnose(
    fit: &DmlFit,
    k: usize,
    expected: &[(String, Sign)],
    threshold: f64,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    let z = &fit.design.z;
    let influence = if fit.causal_model.kind == LearnerKind::Ols {
        Some(influence(&z.x, &fit.design.y, fit.saved.options.intercept)?)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        vif: vif_matrix(&z.x, &z.names),
        influence,
        outliers: outlier_report(&fit.residuals, k),
        sign_flags: sign_flags(fit, expected, threshold),
    })
}
