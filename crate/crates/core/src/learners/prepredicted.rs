//! Externally produced first-stage forecasts, looked up by row key.

use std::collections::HashMap;

use super::{LearnerError, Result};
use crate::data_model::{LongTable, PanelDataset};
use crate::design::RowKey;

/// Predictions keyed by (variable, unit, reference time, lead).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    entries: HashMap<String, HashMap<RowKey, f64>>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl PredictionTable {
    /// Empty table; the labels are used only to name missing keys.
    pub fn new(unit_labels: Vec<String>, time_labels: Vec<String>) -> Self {
        Self {
            entries: HashMap::new(),
            unit_labels,
            time_labels,
        }
    }

    pub fn insert(&mut self, variable: &str, key: RowKey, value: f64) {
        self.entries
            .entry(variable.to_string())
            .or_default()
            .insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, variable: &str, key: RowKey) -> Option<f64> {
        self.entries.get(variable)?.get(&key).copied()
    }

    pub fn lookup(&self, variable: &str, key: RowKey) -> Result<f64> {
        self.get(variable, key).ok_or_else(|| LearnerError::MissingPrediction {
            variable: variable.to_string(),
            unit: label(&self.unit_labels, key.unit),
            time: label(&self.time_labels, key.time),
            lead: key.lead,
        })
    }

    /// Reads the long format `(unit keys..., time, lead, variable,
    /// prediction)`, where `time` is the reference period of the row.
    pub fn from_long_table(table: &LongTable, ds: &PanelDataset) -> Result<Self> {
        let schema = ds.schema();
        let col = |name: &str| {
            table
                .header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| LearnerError::InvalidPredictions(format!("missing column '{name}'")))
        };
        let unit_cols = schema
            .panel_colnames()
            .iter()
            .map(|p| col(p))
            .collect::<Result<Vec<_>>>()?;
        let tcol = col(schema.time_colname())?;
        let lcol = col("lead")?;
        let vcol = col("variable")?;
        let pcol = col("prediction")?;
        let units: HashMap<Vec<String>, usize> = (0..ds.n_units())
            .map(|u| (ds.unit_key(u).into_iter().map(String::from).collect(), u))
            .collect();
        let mut out = Self::new(
            (0..ds.n_units()).map(|u| ds.unit_label(u)).collect(),
            (0..ds.n_periods()).map(|t| ds.time_label(t)).collect(),
        );
        for (i, row) in table.rows.iter().enumerate() {
            let bad = |what: &str| {
                LearnerError::InvalidPredictions(format!("row {}: {what}", i + 1))
            };
            let key: Vec<String> = unit_cols.iter().map(|&c| row[c].clone()).collect();
            let Some(&unit) = units.get(&key) else {
                return Err(bad(&format!("unknown unit '{}'", key.join("|"))));
            };
            let t = ds
                .parse_time_label(&row[tcol])
                .filter(|t| *t >= 0)
                .ok_or_else(|| bad(&format!("bad time '{}'", row[tcol])))?;
            let lead: u32 = row[lcol]
                .trim()
                .parse()
                .map_err(|_| bad(&format!("bad lead '{}'", row[lcol])))?;
            let v: f64 = row[pcol]
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| bad(&format!("bad prediction '{}'", row[pcol])))?;
            out.insert(&row[vcol], RowKey::new(unit, t as usize, lead as usize), v);
        }
        Ok(out)
    }
}

fn label(labels: &[String], i: u32) -> String {
    labels
        .get(i as usize)
        .cloned()
        .unwrap_or_else(|| i.to_string())
}
