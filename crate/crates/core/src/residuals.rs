//! Honest first-stage residuals per (variable, lead), on the dense
//! (unit, reference period) grid.

use crate::data_model::{LongTable, PanelDataset};

#[derive(Debug, Clone, PartialEq)]
struct Series {
    variable: String,
    lead: usize,
    actual: Vec<f64>,
    predicted: Vec<f64>,
}

/// Residual `actual − prediction` for every first-stage row; absent cells
/// are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPanel {
    n_units: usize,
    n_periods: usize,
    series: Vec<Series>,
}

impl ResidualPanel {
    pub fn new(n_units: usize, n_periods: usize) -> Self {
        Self {
            n_units,
            n_periods,
            series: Vec::new(),
        }
    }

    fn find(&self, variable: &str, lead: usize) -> Option<&Series> {
        self.series
            .iter()
            .find(|s| s.variable == variable && s.lead == lead)
    }

    /// Registers one series from `(unit, time, actual, predicted)` rows.
    pub fn insert(
        &mut self,
        variable: &str,
        lead: usize,
        rows: impl IntoIterator<Item = (usize, usize, f64, f64)>,
    ) {
        let n = self.n_units * self.n_periods;
        let mut s = Series {
            variable: variable.to_string(),
            lead,
            actual: vec![f64::NAN; n],
            predicted: vec![f64::NAN; n],
        };
        for (u, t, a, p) in rows {
            let i = u * self.n_periods + t;
            s.actual[i] = a;
            s.predicted[i] = p;
        }
        self.series.retain(|o| !(o.variable == variable && o.lead == lead));
        self.series.push(s);
    }

    pub fn has(&self, variable: &str, lead: usize) -> bool {
        self.find(variable, lead).is_some()
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Residual at (unit, reference period); `None` when absent.
    pub fn get(&self, variable: &str, lead: usize, unit: usize, t: i64) -> Option<f64> {
        let s = self.find(variable, lead)?;
        self.cell(s, unit, t).map(|i| s.actual[i] - s.predicted[i])
    }

    fn cell(&self, s: &Series, unit: usize, t: i64) -> Option<usize> {
        if t < 0 || t as usize >= self.n_periods || unit >= self.n_units {
            return None;
        }
        let i = unit * self.n_periods + t as usize;
        (!s.actual[i].is_nan()).then_some(i)
    }

    /// `(unit, time, actual, predicted)` of one series in (unit, time) order.
    pub fn rows(&self, variable: &str, lead: usize) -> Vec<(usize, usize, f64, f64)> {
        let Some(s) = self.find(variable, lead) else {
            return Vec::new();
        };
        (0..self.n_units * self.n_periods)
            .filter(|&i| !s.actual[i].is_nan())
            .map(|i| (i / self.n_periods, i % self.n_periods, s.actual[i], s.predicted[i]))
            .collect()
    }

    /// `(variable, lead)` of every series, in insertion order.
    pub fn series_ids(&self) -> Vec<(String, usize)> {
        self.series
            .iter()
            .map(|s| (s.variable.clone(), s.lead))
            .collect()
    }

    /// `(unit keys..., time, lead, variable, actual, predicted, residual)`.
    pub fn to_long_table(&self, ds: &PanelDataset, fmt: impl Fn(f64) -> String) -> LongTable {
        let schema = ds.schema();
        let mut header: Vec<String> = schema.panel_colnames().to_vec();
        header.extend(
            [schema.time_colname(), "lead", "variable", "actual", "predicted", "residual"]
                .iter()
                .map(|s| s.to_string()),
        );
        let mut rows = Vec::new();
        for s in &self.series {
            for (u, t, a, p) in self.rows(&s.variable, s.lead) {
                let mut r: Vec<String> = ds.unit_key(u).into_iter().map(String::from).collect();
                r.push(ds.time_label(t));
                r.push(s.lead.to_string());
                r.push(s.variable.clone());
                r.push(fmt(a));
                r.push(fmt(p));
                r.push(fmt(a - p));
                rows.push(r);
            }
        }
        LongTable { header, rows }
    }
}
