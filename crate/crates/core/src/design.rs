//! Dense design matrices with named columns and (unit, reference time, lead)
//! row keys.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Identifies one design row: a panel unit seen from a reference period,
/// forecasting `lead` periods ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub unit: u32,
    pub time: u32,
    pub lead: u32,
}

impl RowKey {
    pub fn new(unit: usize, time: usize, lead: usize) -> Self {
        Self {
            unit: unit as u32,
            time: time as u32,
            lead: lead as u32,
        }
    }

    /// Period of the forecast target.
    pub fn outcome_time(&self) -> usize {
        (self.time + self.lead) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub keys: Vec<RowKey>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, names: Vec<String>, keys: Vec<RowKey>) -> Self {
        assert_eq!(x.ncols(), names.len(), "one name per column");
        assert_eq!(x.nrows(), keys.len(), "one key per row");
        Self { x, names, keys }
    }

    /// Unkeyed matrix with generated column names `x0, x1, ...`; rows get
    /// keys `(row, 0, 0)`.
    pub fn from_matrix(x: DMatrix<f64>) -> Self {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let keys = (0..x.nrows()).map(|i| RowKey::new(i, 0, 0)).collect();
        Self { x, names, keys }
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-row unit ids, used to group rows for cross-validation.
    pub fn units(&self) -> Vec<u32> {
        self.keys.iter().map(|k| k.unit).collect()
    }
}
