//! First-stage design matrices built from the information available at a
//! reference date.
//!
//! A row is keyed by (unit, reference period t, lead τ). Its features use
//! only values dated at or before t, except the time dummies, which describe
//! the outcome date t + τ (calendar attributes are known in advance). Its
//! targets are the outcome and every treatment at t + τ.

use std::collections::{BTreeMap, HashSet};

use log::info;
use nalgebra::DMatrix;
use thiserror::Error;

use crate::data_model::{DataType, LongTable, PanelDataset};
use crate::design::{DesignMatrix, RowKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaturizeError {
    #[error("UnknownExcludeName: '{0}' is not a categorical column or the time column")]
    UnknownExcludeName(String),
    #[error("InvalidLagRange: need 0 <= min_lag <= max_lag, got {min}..{max}")]
    InvalidLagRange { min: usize, max: usize },
    #[error("NoUsableRows: no complete rows at lead {lead} ({excluded} excluded)")]
    NoUsableRows { lead: usize, excluded: usize },
    #[error("EmptyBuilders: no feature builders")]
    EmptyBuilders,
    #[error("DuplicateFeature: '{0}' produced twice")]
    DuplicateFeature(String),
    #[error("UnknownColumn: '{0}'")]
    UnknownColumn(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureBuilder {
    /// Numeric column at the reference date.
    Numeric { col: String },
    /// One indicator per non-baseline level of a categorical column (the
    /// unit's key for panel columns, the reference-date value otherwise).
    LevelDummies { col: String, levels: Vec<String> },
    /// One indicator per non-baseline period of the outcome date.
    TimeDummies { labels: Vec<String> },
    /// Value of an outcome or treatment `lag` periods before the reference
    /// date.
    Lag { var: String, lag: usize },
    /// Change over the lag window: value at `min_lag` minus value at
    /// `max_lag`.
    Trend {
        var: String,
        min_lag: usize,
        max_lag: usize,
    },
}

impl FeatureBuilder {
    pub fn name(&self) -> String {
        match self {
            FeatureBuilder::Numeric { col } => col.clone(),
            FeatureBuilder::LevelDummies { col, .. } => format!("{col}:dummies"),
            FeatureBuilder::TimeDummies { .. } => "time:dummies".into(),
            FeatureBuilder::Lag { var, lag } => format!("{var}_lag{lag}"),
            FeatureBuilder::Trend { var, .. } => format!("{var}_trend"),
        }
    }

    /// Output column names.
    pub fn produces(&self) -> Vec<String> {
        match self {
            FeatureBuilder::LevelDummies { col, levels } => {
                levels.iter().map(|l| format!("{col}={l}")).collect()
            }
            FeatureBuilder::TimeDummies { labels } => {
                labels.iter().map(|l| format!("t={l}")).collect()
            }
            _ => vec![self.name()],
        }
    }

    pub fn required_lags(&self) -> Vec<usize> {
        match self {
            FeatureBuilder::Lag { lag, .. } => vec![*lag],
            FeatureBuilder::Trend { min_lag, max_lag, .. } => vec![*min_lag, *max_lag],
            _ => vec![0],
        }
    }

    /// Whether the builder is usable at `lead`. At lead 0 the contemporaneous
    /// outcome and treatment values are the first-stage targets themselves.
    fn active(&self, lead: usize) -> bool {
        !matches!(self, FeatureBuilder::Lag { lag: 0, .. } if lead == 0)
    }
}

fn dummy_families(ds: &PanelDataset) -> Vec<String> {
    ds.schema()
        .cols()
        .iter()
        .filter(|c| c.data_type == DataType::Categorical)
        .map(|c| c.name.clone())
        .collect()
}

fn check_excludes(ds: &PanelDataset, exclude: &[String]) -> Result<(), FeaturizeError> {
    let fams = dummy_families(ds);
    for e in exclude {
        if !fams.contains(e) && e != ds.schema().time_colname() {
            return Err(FeaturizeError::UnknownExcludeName(e.clone()));
        }
    }
    Ok(())
}

/// Numeric features, time dummies and one dummy family per categorical
/// column (panel keys included), each dropping its first level.
pub fn panel_featurizer(
    ds: &PanelDataset,
    exclude_dummies: &[String],
) -> Result<Vec<FeatureBuilder>, FeaturizeError> {
    check_excludes(ds, exclude_dummies)?;
    let schema = ds.schema();
    let mut out = Vec::new();
    for c in schema.feature_cols() {
        if c.data_type == DataType::Numeric {
            out.push(FeatureBuilder::Numeric { col: c.name.clone() });
        }
    }
    let time = schema.time_colname().to_string();
    if !exclude_dummies.contains(&time) && ds.n_periods() > 1 {
        out.push(FeatureBuilder::TimeDummies {
            labels: (1..ds.n_periods()).map(|t| ds.time_label(t)).collect(),
        });
    }
    for fam in dummy_families(ds) {
        if exclude_dummies.contains(&fam) {
            continue;
        }
        let levels = ds.levels(&fam).expect("categorical");
        if levels.len() > 1 {
            out.push(FeatureBuilder::LevelDummies {
                col: fam,
                levels: levels[1..].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Panel features plus lags `min_lag..=max_lag` and a trend of the outcome
/// and every treatment.
pub fn dynamic_featurizer(
    ds: &PanelDataset,
    min_lag: usize,
    max_lag: usize,
    exclude_dummies: &[String],
) -> Result<Vec<FeatureBuilder>, FeaturizeError> {
    if min_lag > max_lag {
        return Err(FeaturizeError::InvalidLagRange {
            min: min_lag,
            max: max_lag,
        });
    }
    let mut out = panel_featurizer(ds, exclude_dummies)?;
    let schema = ds.schema();
    let mut vars = vec![schema.outcome().to_string()];
    vars.extend(schema.treatments().into_iter().map(String::from));
    for v in &vars {
        for lag in min_lag..=max_lag {
            out.push(FeatureBuilder::Lag { var: v.clone(), lag });
        }
    }
    for v in vars {
        out.push(FeatureBuilder::Trend {
            var: v,
            min_lag,
            max_lag,
        });
    }
    Ok(out)
}

/// Design rows and targets for one lead.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedPanel {
    pub lead: usize,
    pub design: DesignMatrix,
    /// Target values at reference + lead, aligned with design rows. Empty
    /// for scoring panels.
    pub targets: BTreeMap<String, Vec<f64>>,
    pub excluded: usize,
}

impl FeaturizedPanel {
    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    /// `(unit keys..., time, lead, features..., target_<var>...)`.
    pub fn to_long_table(&self, ds: &PanelDataset) -> LongTable {
        let schema = ds.schema();
        let mut header: Vec<String> = schema.panel_colnames().to_vec();
        header.push(schema.time_colname().to_string());
        header.push("lead".into());
        header.extend(self.design.names.iter().cloned());
        header.extend(self.targets.keys().map(|k| format!("target_{k}")));
        let rows = (0..self.nrows())
            .map(|i| {
                let k = self.design.keys[i];
                let mut r: Vec<String> = ds
                    .unit_key(k.unit as usize)
                    .into_iter()
                    .map(String::from)
                    .collect();
                r.push(ds.time_label(k.time as usize));
                r.push(k.lead.to_string());
                r.extend((0..self.design.ncols()).map(|j| format!("{}", self.design.x[(i, j)])));
                r.extend(self.targets.values().map(|v| format!("{}", v[i])));
                r
            })
            .collect();
        LongTable { header, rows }
    }

    /// Feature names, one per line.
    pub fn manifest(&self) -> String {
        let mut s = self.design.names.join("\n");
        s.push('\n');
        s
    }
}

enum Source<'a> {
    Numeric(&'a [f64]),
    PanelLevel { pos: usize, base: usize, n: usize },
    Categorical { codes: &'a [Option<u32>], base: usize, n: usize },
    Time { n: usize },
    Lag { vals: &'a [f64], lag: usize },
    Trend { vals: &'a [f64], hi: usize, lo: usize },
    Zero,
}

fn resolve<'a>(
    ds: &'a PanelDataset,
    b: &FeatureBuilder,
    lead: usize,
) -> Result<Source<'a>, FeaturizeError> {
    let num = |c: &str| {
        ds.numeric(c)
            .ok_or_else(|| FeaturizeError::UnknownColumn(c.to_string()))
    };
    Ok(match b {
        FeatureBuilder::Numeric { col } => Source::Numeric(num(col)?),
        FeatureBuilder::LevelDummies { col, levels } => {
            let all = ds
                .levels(col)
                .ok_or_else(|| FeaturizeError::UnknownColumn(col.clone()))?;
            let base = all.len() - levels.len();
            match ds.schema().panel_colnames().iter().position(|p| p == col) {
                Some(pos) => Source::PanelLevel {
                    pos,
                    base,
                    n: levels.len(),
                },
                None => Source::Categorical {
                    codes: ds.categorical(col).expect("categorical"),
                    base,
                    n: levels.len(),
                },
            }
        }
        FeatureBuilder::TimeDummies { labels } => Source::Time { n: labels.len() },
        FeatureBuilder::Lag { var, lag } => Source::Lag {
            vals: num(var)?,
            lag: *lag,
        },
        FeatureBuilder::Trend {
            var,
            min_lag,
            max_lag,
        } => {
            let hi = if lead == 0 { (*min_lag).max(1) } else { *min_lag };
            if hi >= *max_lag {
                Source::Zero
            } else {
                Source::Trend {
                    vals: num(var)?,
                    hi,
                    lo: *max_lag,
                }
            }
        }
    })
}

fn active_builders<'b>(
    builders: &'b [FeatureBuilder],
    lead: usize,
) -> Result<(Vec<&'b FeatureBuilder>, Vec<String>), FeaturizeError> {
    if builders.is_empty() {
        return Err(FeaturizeError::EmptyBuilders);
    }
    let active: Vec<&FeatureBuilder> = builders.iter().filter(|b| b.active(lead)).collect();
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for b in &active {
        for n in b.produces() {
            if !seen.insert(n.clone()) {
                return Err(FeaturizeError::DuplicateFeature(n));
            }
            names.push(n);
        }
    }
    Ok((active, names))
}

/// Writes the features of (unit, t) viewed at `lead` into `out`; returns
/// false when a required value is missing.
fn fill_row(
    ds: &PanelDataset,
    sources: &[Source],
    unit: usize,
    t: usize,
    lead: usize,
    out: &mut [f64],
) -> bool {
    let Some(r) = ds.row_at(unit, t as i64) else {
        return false;
    };
    let ti = t as i64;
    let mut j = 0;
    for s in sources {
        match s {
            Source::Numeric(v) => {
                if v[r].is_nan() {
                    return false;
                }
                out[j] = v[r];
                j += 1;
            }
            Source::PanelLevel { pos, base, n } => {
                let code = ds.unit_codes(unit)[*pos] as usize;
                for i in 0..*n {
                    out[j + i] = if code == base + i { 1.0 } else { 0.0 };
                }
                j += n;
            }
            Source::Categorical { codes, base, n } => {
                let Some(code) = codes[r] else { return false };
                for i in 0..*n {
                    out[j + i] = if code as usize == base + i { 1.0 } else { 0.0 };
                }
                j += n;
            }
            Source::Time { n } => {
                let ot = t + lead;
                for i in 0..*n {
                    out[j + i] = if ot == i + 1 { 1.0 } else { 0.0 };
                }
                j += n;
            }
            Source::Lag { vals, lag } => {
                let Some(v) = ds.value_at(vals, unit, ti - *lag as i64) else {
                    return false;
                };
                out[j] = v;
                j += 1;
            }
            Source::Trend { vals, hi, lo } => {
                let a = ds.value_at(vals, unit, ti - *hi as i64);
                let b = ds.value_at(vals, unit, ti - *lo as i64);
                let (Some(a), Some(b)) = (a, b) else {
                    return false;
                };
                out[j] = a - b;
                j += 1;
            }
            Source::Zero => {
                out[j] = 0.0;
                j += 1;
            }
        }
    }
    true
}

fn target_vars(ds: &PanelDataset) -> Vec<String> {
    let s = ds.schema();
    let mut v = vec![s.outcome().to_string()];
    v.extend(s.treatments().into_iter().map(String::from));
    v
}

/// Training rows at `lead`, possibly none.
pub fn featurize(
    ds: &PanelDataset,
    builders: &[FeatureBuilder],
    lead: usize,
) -> Result<FeaturizedPanel, FeaturizeError> {
    let (active, names) = active_builders(builders, lead)?;
    let sources = active
        .iter()
        .map(|b| resolve(ds, b, lead))
        .collect::<Result<Vec<_>, _>>()?;
    let vars = target_vars(ds);
    let cols: Vec<&[f64]> = vars.iter().map(|v| ds.numeric(v).expect("numeric")).collect();
    let p = names.len();
    let mut data: Vec<f64> = Vec::new();
    let mut keys = Vec::new();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); vars.len()];
    let mut buf = vec![0.0; p];
    let mut excluded = 0usize;
    for unit in 0..ds.n_units() {
        for row in ds.unit_rows(unit) {
            let t = ds.row_time(row);
            let tv: Option<Vec<f64>> = cols
                .iter()
                .map(|c| ds.value_at(c, unit, (t + lead) as i64))
                .collect();
            let Some(tv) = tv else {
                excluded += 1;
                continue;
            };
            if !fill_row(ds, &sources, unit, t, lead, &mut buf) {
                excluded += 1;
                continue;
            }
            data.extend_from_slice(&buf);
            keys.push(RowKey::new(unit, t, lead));
            for (acc, v) in targets.iter_mut().zip(tv) {
                acc.push(v);
            }
        }
    }
    if excluded > 0 {
        info!("lead {lead}: {excluded} rows excluded for missing lags or targets");
    }
    let x = DMatrix::from_row_slice(keys.len(), p, &data);
    Ok(FeaturizedPanel {
        lead,
        design: DesignMatrix::new(x, names, keys),
        targets: vars.into_iter().zip(targets).collect(),
        excluded,
    })
}

/// Like [`featurize`] but fails when no row survives.
pub fn build_features(
    ds: &PanelDataset,
    builders: &[FeatureBuilder],
    lead: usize,
) -> Result<FeaturizedPanel, FeaturizeError> {
    let fp = featurize(ds, builders, lead)?;
    if fp.nrows() == 0 {
        return Err(FeaturizeError::NoUsableRows {
            lead,
            excluded: fp.excluded,
        });
    }
    Ok(fp)
}

/// Scoring rows for every unit whose features are complete at reference
/// period `t`, targets not required. Time dummies for outcome dates past
/// the observed grid are all zero.
pub fn scoring_rows(
    ds: &PanelDataset,
    builders: &[FeatureBuilder],
    lead: usize,
    t: usize,
) -> Result<FeaturizedPanel, FeaturizeError> {
    let (active, names) = active_builders(builders, lead)?;
    let sources = active
        .iter()
        .map(|b| resolve(ds, b, lead))
        .collect::<Result<Vec<_>, _>>()?;
    let p = names.len();
    let mut data = Vec::new();
    let mut keys = Vec::new();
    let mut buf = vec![0.0; p];
    let mut excluded = 0;
    for unit in 0..ds.n_units() {
        if fill_row(ds, &sources, unit, t, lead, &mut buf) {
            data.extend_from_slice(&buf);
            keys.push(RowKey::new(unit, t, lead));
        } else {
            excluded += 1;
        }
    }
    let x = DMatrix::from_row_slice(keys.len(), p, &data);
    Ok(FeaturizedPanel {
        lead,
        design: DesignMatrix::new(x, names, keys),
        targets: BTreeMap::new(),
        excluded,
    })
}
