//! Typed panel-data container.
//!
//! A [`Schema`] declares which columns hold the outcome, the treatments, the
//! time index and the panel keys. [`PanelDataset`] is the validated, immutable
//! long-format table built from it: rows are sorted by unit and then time,
//! categorical values are interned as dense codes in first-appearance order,
//! and dates are mapped once to a contiguous integer period grid so that all
//! lag and lead arithmetic downstream is integer arithmetic.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel for an absent (unit, time) cell in the dense grid.
const ABSENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataType {
    Numeric,
    Categorical,
    DateTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColType {
    Outcome,
    Treatment,
    #[default]
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColDef {
    pub name: String,
    pub data_type: DataType,
    #[serde(default)]
    pub col_type: ColType,
}

impl ColDef {
    pub fn new(name: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            data_type,
            col_type: ColType::Feature,
        }
    }

    pub fn with_role(mut self, col_type: ColType) -> Self {
        self.col_type = col_type;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("column name must be nonempty")]
    EmptyName,
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("outcome/treatment column `{0}` must be numeric")]
    NonNumericRole(String),
    #[error("schema declares no outcome column")]
    NoOutcome,
    #[error("schema declares more than one outcome column: {0:?}")]
    MultipleOutcomes(Vec<String>),
    #[error("schema declares no treatment column")]
    NoTreatment,
    #[error("time column `{0}` is not declared")]
    UnknownTimeColumn(String),
    #[error("time column `{0}` must have type date_time")]
    TimeNotDateTime(String),
    #[error("panel column `{0}` is not declared")]
    UnknownPanelColumn(String),
    #[error("panel column `{0}` must be categorical")]
    PanelNotCategorical(String),
    #[error("at least one panel column is required")]
    NoPanelColumns,
}

/// Column declarations plus the time and panel-key designations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct Schema {
    cols: Vec<ColDef>,
    time_colname: String,
    panel_colnames: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    cols: Vec<ColDef>,
    time_colname: String,
    panel_colnames: Vec<String>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = SchemaError;
    fn try_from(raw: RawSchema) -> Result<Self, SchemaError> {
        Schema::new(raw.cols, raw.time_colname, raw.panel_colnames)
    }
}

impl From<Schema> for RawSchema {
    fn from(s: Schema) -> Self {
        RawSchema {
            cols: s.cols,
            time_colname: s.time_colname,
            panel_colnames: s.panel_colnames,
        }
    }
}

impl Schema {
    pub fn new(
        cols: Vec<ColDef>,
        time_colname: impl Into<String>,
        panel_colnames: Vec<String>,
    ) -> Result<Self, SchemaError> {
        let time_colname = time_colname.into();
        let mut seen = std::collections::HashSet::new();
        for c in &cols {
            if c.name.is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if !seen.insert(c.name.as_str()) {
                return Err(SchemaError::DuplicateColumn(c.name.clone()));
            }
            if c.col_type != ColType::Feature && c.data_type != DataType::Numeric {
                return Err(SchemaError::NonNumericRole(c.name.clone()));
            }
        }
        let outcomes: Vec<String> = cols
            .iter()
            .filter(|c| c.col_type == ColType::Outcome)
            .map(|c| c.name.clone())
            .collect();
        match outcomes.len() {
            0 => return Err(SchemaError::NoOutcome),
            1 => {}
            _ => return Err(SchemaError::MultipleOutcomes(outcomes)),
        }
        if !cols.iter().any(|c| c.col_type == ColType::Treatment) {
            return Err(SchemaError::NoTreatment);
        }
        match cols.iter().find(|c| c.name == time_colname) {
            None => return Err(SchemaError::UnknownTimeColumn(time_colname)),
            Some(c) if c.data_type != DataType::DateTime => {
                return Err(SchemaError::TimeNotDateTime(time_colname))
            }
            Some(_) => {}
        }
        if panel_colnames.is_empty() {
            return Err(SchemaError::NoPanelColumns);
        }
        for p in &panel_colnames {
            match cols.iter().find(|c| &c.name == p) {
                None => return Err(SchemaError::UnknownPanelColumn(p.clone())),
                Some(c) if c.data_type != DataType::Categorical => {
                    return Err(SchemaError::PanelNotCategorical(p.clone()))
                }
                Some(_) => {}
            }
        }
        Ok(Self {
            cols,
            time_colname,
            panel_colnames,
        })
    }

    pub fn cols(&self) -> &[ColDef] {
        &self.cols
    }

    pub fn time_colname(&self) -> &str {
        &self.time_colname
    }

    pub fn panel_colnames(&self) -> &[String] {
        &self.panel_colnames
    }

    pub fn col(&self, name: &str) -> Option<&ColDef> {
        self.cols.iter().find(|c| c.name == name)
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.cols.iter().position(|c| c.name == name)
    }

    pub fn outcome(&self) -> &str {
        &self
            .cols
            .iter()
            .find(|c| c.col_type == ColType::Outcome)
            .expect("validated schema has an outcome")
            .name
    }

    pub fn treatments(&self) -> Vec<&str> {
        self.cols
            .iter()
            .filter(|c| c.col_type == ColType::Treatment)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn is_panel_col(&self, name: &str) -> bool {
        self.panel_colnames.iter().any(|p| p == name)
    }

    /// Feature-role columns other than the time column and panel keys.
    pub fn feature_cols(&self) -> impl Iterator<Item = &ColDef> {
        self.cols.iter().filter(move |c| {
            c.col_type == ColType::Feature && c.name != self.time_colname && !self.is_panel_col(&c.name)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Day,
    #[default]
    Week,
    Month,
}

/// How the time column is spelled in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFormat {
    /// Integer period index (e.g. week number).
    Period,
    /// ISO-8601 date (`YYYY-MM-DD`) on a grid of the given granularity.
    Date(Granularity),
}

impl Default for TimeFormat {
    fn default() -> Self {
        TimeFormat::Period
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub time_format: TimeFormat,
    pub na_tokens: Vec<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            time_format: TimeFormat::Period,
            na_tokens: vec![String::new(), "NA".to_string()],
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` missing from input header")]
    MissingColumn(String),
    #[error("input has a header but no data rows")]
    MissingData,
    #[error("duplicate (unit, time) pair: unit {unit}, time {time}")]
    DuplicateKey { unit: String, time: String },
    #[error("row {row}, column `{col}`: cannot parse {value:?}")]
    TypeParseError { row: usize, col: String, value: String },
    #[error("time values are not on a uniform {0} grid")]
    NonUniformTimeGrid(String),
    #[error("window [{t_min}, {t_max}] contains no observations")]
    EmptyWindow { t_min: usize, t_max: usize },
    #[error("row {row} has {got} fields, header has {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<Option<u32>>),
    Time,
}

/// Validated long-format panel, immutable after construction.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    schema: Schema,
    time_format: TimeFormat,
    /// Raw period value (or date) of time index 0.
    origin: TimeOrigin,
    n_periods: usize,
    time_labels: Vec<String>,
    levels: Vec<Vec<String>>,
    columns: Vec<Column>,
    /// Unit keys as level codes of each panel column.
    units: Vec<Vec<u32>>,
    row_unit: Vec<u32>,
    row_time: Vec<u32>,
    unit_rows: Vec<(usize, usize)>,
    grid: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TimeOrigin {
    Period(i64),
    Date(NaiveDate),
}

/// One long-format table: header plus string cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LongTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl LongTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.header)?;
        for r in &self.rows {
            wtr.write_record(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Reads a CSV file into a header and string rows (no typing).
pub fn read_table(path: impl AsRef<Path>) -> Result<LongTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow {
                row: i + 1,
                got: rec.len(),
                expected: header.len(),
            });
        }
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    Ok(LongTable { header, rows })
}

/// Loads and validates a panel CSV.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &Schema,
    options: &IngestOptions,
) -> Result<PanelDataset, DataError> {
    let table = read_table(path)?;
    PanelDataset::from_table(schema.clone(), options, &table)
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn month_number(d: NaiveDate) -> i64 {
    d.year() as i64 * 12 + d.month0() as i64
}

impl PanelDataset {
    /// Builds a dataset from an in-memory string table. This is the single
    /// validation path shared by CSV ingestion and generated data.
    pub fn from_table(
        schema: Schema,
        options: &IngestOptions,
        table: &LongTable,
    ) -> Result<Self, DataError> {
        let mut col_pos = Vec::with_capacity(schema.cols().len());
        for c in schema.cols() {
            let pos = table
                .header
                .iter()
                .position(|h| h == &c.name)
                .ok_or_else(|| DataError::MissingColumn(c.name.clone()))?;
            col_pos.push(pos);
        }
        if table.rows.is_empty() {
            return Err(DataError::MissingData);
        }
        let is_na = |s: &str| options.na_tokens.iter().any(|t| t == s.trim());
        let n = table.rows.len();
        let ncol = schema.cols().len();
        let time_idx = schema.col_index(schema.time_colname()).expect("validated");

        // Parse time cells into a raw integer key.
        let mut raw_time = Vec::with_capacity(n);
        let mut dates = Vec::new();
        for (r, row) in table.rows.iter().enumerate() {
            let cell = &row[col_pos[time_idx]];
            let bad = || DataError::TypeParseError {
                row: r + 1,
                col: schema.time_colname().to_string(),
                value: cell.clone(),
            };
            if is_na(cell) {
                return Err(bad());
            }
            match options.time_format {
                TimeFormat::Period => {
                    raw_time.push(cell.trim().parse::<i64>().map_err(|_| bad())?);
                }
                TimeFormat::Date(g) => {
                    let d = parse_date(cell).ok_or_else(bad)?;
                    dates.push(d);
                    raw_time.push(match g {
                        Granularity::Day | Granularity::Week => {
                            d.num_days_from_ce() as i64
                        }
                        Granularity::Month => month_number(d),
                    });
                }
            }
        }
        let min_raw = *raw_time.iter().min().expect("nonempty");
        let max_raw = *raw_time.iter().max().expect("nonempty");
        let step = match options.time_format {
            TimeFormat::Date(Granularity::Week) => 7,
            _ => 1,
        };
        if step > 1 && raw_time.iter().any(|t| (t - min_raw) % step != 0) {
            return Err(DataError::NonUniformTimeGrid("week".to_string()));
        }
        let n_periods = ((max_raw - min_raw) / step + 1) as usize;
        let time_of: Vec<u32> = raw_time
            .iter()
            .map(|t| ((t - min_raw) / step) as u32)
            .collect();
        let origin = match options.time_format {
            TimeFormat::Period => TimeOrigin::Period(min_raw),
            TimeFormat::Date(_) => {
                let first = dates
                    .iter()
                    .zip(&raw_time)
                    .find(|(_, t)| **t == min_raw)
                    .map(|(d, _)| *d)
                    .expect("nonempty");
                TimeOrigin::Date(first)
            }
        };

        // Parse value columns and intern categoricals in first-appearance order.
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); ncol];
        let mut columns: Vec<Column> = Vec::with_capacity(ncol);
        for (j, c) in schema.cols().iter().enumerate() {
            if j == time_idx {
                columns.push(Column::Time);
                continue;
            }
            match c.data_type {
                DataType::Numeric => {
                    let mut v = Vec::with_capacity(n);
                    for (r, row) in table.rows.iter().enumerate() {
                        let cell = &row[col_pos[j]];
                        if is_na(cell) {
                            v.push(f64::NAN);
                            continue;
                        }
                        let x: f64 = cell.trim().parse().map_err(|_| DataError::TypeParseError {
                            row: r + 1,
                            col: c.name.clone(),
                            value: cell.clone(),
                        })?;
                        if !x.is_finite() {
                            return Err(DataError::TypeParseError {
                                row: r + 1,
                                col: c.name.clone(),
                                value: cell.clone(),
                            });
                        }
                        v.push(x);
                    }
                    columns.push(Column::Numeric(v));
                }
                DataType::Categorical => {
                    let mut index: HashMap<&str, u32> = HashMap::new();
                    let mut v = Vec::with_capacity(n);
                    for (r, row) in table.rows.iter().enumerate() {
                        let cell = row[col_pos[j]].as_str();
                        if is_na(cell) {
                            if schema.is_panel_col(&c.name) {
                                return Err(DataError::TypeParseError {
                                    row: r + 1,
                                    col: c.name.clone(),
                                    value: cell.to_string(),
                                });
                            }
                            v.push(None);
                            continue;
                        }
                        let next = index.len() as u32;
                        let code = *index.entry(cell).or_insert_with(|| {
                            levels[j].push(cell.to_string());
                            next
                        });
                        v.push(Some(code));
                    }
                    columns.push(Column::Categorical(v));
                }
                DataType::DateTime => {
                    // Secondary date columns are carried as categorical labels.
                    let mut index: HashMap<&str, u32> = HashMap::new();
                    let mut v = Vec::with_capacity(n);
                    for row in &table.rows {
                        let cell = row[col_pos[j]].as_str();
                        if is_na(cell) {
                            v.push(None);
                            continue;
                        }
                        let next = index.len() as u32;
                        let code = *index.entry(cell).or_insert_with(|| {
                            levels[j].push(cell.to_string());
                            next
                        });
                        v.push(Some(code));
                    }
                    columns.push(Column::Categorical(v));
                }
            }
        }

        // Unit keys.
        let panel_idx: Vec<usize> = schema
            .panel_colnames()
            .iter()
            .map(|p| schema.col_index(p).expect("validated"))
            .collect();
        let key_of = |r: usize| -> Vec<u32> {
            panel_idx
                .iter()
                .map(|&j| match &columns[j] {
                    Column::Categorical(v) => v[r].expect("panel keys are never missing"),
                    _ => unreachable!("panel columns are categorical"),
                })
                .collect()
        };
        let mut unit_index: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut units: Vec<Vec<u32>> = Vec::new();
        let mut unit_raw = Vec::with_capacity(n);
        for r in 0..n {
            let k = key_of(r);
            let next = units.len() as u32;
            let u = *unit_index.entry(k.clone()).or_insert_with(|| {
                units.push(k);
                next
            });
            unit_raw.push(u);
        }
        // Sort units lexicographically by key codes.
        let mut unit_order: Vec<u32> = (0..units.len() as u32).collect();
        unit_order.sort_by(|a, b| units[*a as usize].cmp(&units[*b as usize]));
        let mut rank = vec![0u32; units.len()];
        for (pos, &u) in unit_order.iter().enumerate() {
            rank[u as usize] = pos as u32;
        }
        let sorted_units: Vec<Vec<u32>> = unit_order.iter().map(|&u| units[u as usize].clone()).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| (rank[unit_raw[r] as usize], time_of[r]));
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            if unit_raw[a] == unit_raw[b] && time_of[a] == time_of[b] {
                let unit = panel_idx
                    .iter()
                    .map(|&j| table.rows[a][col_pos[j]].clone())
                    .collect::<Vec<_>>()
                    .join("|");
                return Err(DataError::DuplicateKey {
                    unit,
                    time: table.rows[a][col_pos[time_idx]].clone(),
                });
            }
        }

        let columns = columns
            .into_iter()
            .map(|c| match c {
                Column::Numeric(v) => Column::Numeric(order.iter().map(|&r| v[r]).collect()),
                Column::Categorical(v) => Column::Categorical(order.iter().map(|&r| v[r]).collect()),
                Column::Time => Column::Time,
            })
            .collect();
        let row_unit: Vec<u32> = order.iter().map(|&r| rank[unit_raw[r] as usize]).collect();
        let row_time: Vec<u32> = order.iter().map(|&r| time_of[r]).collect();

        let mut ds = PanelDataset {
            schema,
            time_format: options.time_format,
            origin,
            n_periods,
            time_labels: Vec::new(),
            levels,
            columns,
            units: sorted_units,
            row_unit,
            row_time,
            unit_rows: Vec::new(),
            grid: Vec::new(),
        };
        ds.time_labels = (0..n_periods).map(|t| ds.format_time(t)).collect();
        ds.reindex();
        Ok(ds)
    }

    fn format_time(&self, t: usize) -> String {
        match (self.origin, self.time_format) {
            (TimeOrigin::Period(p), _) => (p + t as i64).to_string(),
            (TimeOrigin::Date(d), TimeFormat::Date(Granularity::Day)) => {
                (d + chrono::Duration::days(t as i64)).format("%Y-%m-%d").to_string()
            }
            (TimeOrigin::Date(d), TimeFormat::Date(Granularity::Week)) => {
                (d + chrono::Duration::days(7 * t as i64)).format("%Y-%m-%d").to_string()
            }
            (TimeOrigin::Date(d), _) => d
                .checked_add_months(Months::new(t as u32))
                .unwrap_or(d)
                .format("%Y-%m-%d")
                .to_string(),
        }
    }

    fn reindex(&mut self) {
        let nu = self.units.len();
        self.unit_rows = vec![(0, 0); nu];
        self.grid = vec![ABSENT; nu * self.n_periods];
        let mut start = 0;
        for r in 0..self.row_unit.len() {
            let u = self.row_unit[r] as usize;
            if r + 1 == self.row_unit.len() || self.row_unit[r + 1] as usize != u {
                self.unit_rows[u] = (start, r + 1);
                start = r + 1;
            }
            self.grid[u * self.n_periods + self.row_time[r] as usize] = r as u32;
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn time_format(&self) -> TimeFormat {
        self.time_format
    }

    pub fn n_rows(&self) -> usize {
        self.row_unit.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Number of periods on the time grid (gaps included).
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn time_label(&self, t: usize) -> String {
        if t < self.time_labels.len() {
            self.time_labels[t].clone()
        } else {
            self.format_time(t)
        }
    }

    /// Maps a time label back to its index on the grid (may lie past the
    /// last observed period).
    pub fn parse_time_label(&self, s: &str) -> Option<i64> {
        match (self.origin, self.time_format) {
            (TimeOrigin::Period(p), _) => s.trim().parse::<i64>().ok().map(|v| v - p),
            (TimeOrigin::Date(o), TimeFormat::Date(g)) => {
                let d = parse_date(s)?;
                match g {
                    Granularity::Day => Some((d - o).num_days()),
                    Granularity::Week => {
                        let days = (d - o).num_days();
                        (days % 7 == 0).then_some(days / 7)
                    }
                    Granularity::Month => Some(month_number(d) - month_number(o)),
                }
            }
            _ => None,
        }
    }

    pub fn row_unit(&self, row: usize) -> usize {
        self.row_unit[row] as usize
    }

    pub fn row_time(&self, row: usize) -> usize {
        self.row_time[row] as usize
    }

    /// Row holding (unit, time), if observed.
    pub fn row_at(&self, unit: usize, time: i64) -> Option<usize> {
        if time < 0 || time as usize >= self.n_periods || unit >= self.units.len() {
            return None;
        }
        let r = self.grid[unit * self.n_periods + time as usize];
        (r != ABSENT).then_some(r as usize)
    }

    pub fn unit_rows(&self, unit: usize) -> std::ops::Range<usize> {
        let (a, b) = self.unit_rows[unit];
        a..b
    }

    /// Panel key codes of a unit.
    pub fn unit_codes(&self, unit: usize) -> &[u32] {
        &self.units[unit]
    }

    /// Panel key values of a unit, in `panel_colnames` order.
    pub fn unit_key(&self, unit: usize) -> Vec<&str> {
        self.schema
            .panel_colnames()
            .iter()
            .zip(&self.units[unit])
            .map(|(p, &c)| {
                let j = self.schema.col_index(p).expect("validated");
                self.levels[j][c as usize].as_str()
            })
            .collect()
    }

    pub fn unit_label(&self, unit: usize) -> String {
        self.unit_key(unit).join("|")
    }

    pub fn find_unit(&self, key: &[&str]) -> Option<usize> {
        (0..self.n_units()).find(|&u| self.unit_key(u) == key)
    }

    pub fn numeric(&self, col: &str) -> Option<&[f64]> {
        match &self.columns[self.schema.col_index(col)?] {
            Column::Numeric(v) => Some(v),
            _ => None,
        }
    }

    pub fn categorical(&self, col: &str) -> Option<&[Option<u32>]> {
        match &self.columns[self.schema.col_index(col)?] {
            Column::Categorical(v) => Some(v),
            _ => None,
        }
    }

    /// Level table of a categorical column (first-appearance order).
    pub fn levels(&self, col: &str) -> Option<&[String]> {
        let j = self.schema.col_index(col)?;
        match self.columns[j] {
            Column::Categorical(_) => Some(&self.levels[j]),
            _ => None,
        }
    }

    /// Numeric value at (unit, time); `None` when the row is absent or the
    /// cell is missing.
    pub fn value_at(&self, col: &[f64], unit: usize, time: i64) -> Option<f64> {
        let r = self.row_at(unit, time)?;
        let v = col[r];
        (!v.is_nan()).then_some(v)
    }

    /// Subset of rows whose time index lies in `[t_min, t_max]`.
    pub fn slice_window(&self, t_min: usize, t_max: usize) -> Result<PanelDataset, DataError> {
        let keep: Vec<usize> = (0..self.n_rows())
            .filter(|&r| {
                let t = self.row_time(r);
                t >= t_min && t <= t_max
            })
            .collect();
        if t_min > t_max || keep.is_empty() {
            return Err(DataError::EmptyWindow { t_min, t_max });
        }
        Ok(self.select_rows(&keep))
    }

    /// Keeps the given rows (ascending), dropping units left without rows and
    /// re-deriving the time index from the first retained period.
    pub fn select_rows(&self, keep: &[usize]) -> PanelDataset {
        let t0 = keep.iter().map(|&r| self.row_time(r)).min().unwrap_or(0);
        let t1 = keep.iter().map(|&r| self.row_time(r)).max().unwrap_or(0);
        let mut unit_map: HashMap<u32, u32> = HashMap::new();
        let mut units = Vec::new();
        for &r in keep {
            let u = self.row_unit[r];
            unit_map.entry(u).or_insert_with(|| {
                units.push(self.units[u as usize].clone());
                (units.len() - 1) as u32
            });
        }
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => Column::Numeric(keep.iter().map(|&r| v[r]).collect()),
                Column::Categorical(v) => Column::Categorical(keep.iter().map(|&r| v[r]).collect()),
                Column::Time => Column::Time,
            })
            .collect();
        let origin = match self.origin {
            TimeOrigin::Period(p) => TimeOrigin::Period(p + t0 as i64),
            TimeOrigin::Date(_) => {
                let label = self.time_label(t0);
                TimeOrigin::Date(parse_date(&label).expect("formatted by us"))
            }
        };
        let n_periods = if keep.is_empty() { 0 } else { t1 - t0 + 1 };
        let mut ds = PanelDataset {
            schema: self.schema.clone(),
            time_format: self.time_format,
            origin,
            n_periods,
            time_labels: (t0..t0 + n_periods).map(|t| self.time_label(t)).collect(),
            levels: self.levels.clone(),
            columns,
            units,
            row_unit: keep.iter().map(|&r| unit_map[&self.row_unit[r]]).collect(),
            row_time: keep.iter().map(|&r| (self.row_time(r) - t0) as u32).collect(),
            unit_rows: Vec::new(),
            grid: Vec::new(),
        };
        ds.reindex();
        ds
    }

    /// Long-format string table in (unit, time) order, columns in schema order.
    pub fn to_long_table(&self) -> LongTable {
        let header = self.schema.cols().iter().map(|c| c.name.clone()).collect();
        let rows = (0..self.n_rows())
            .map(|r| {
                self.columns
                    .iter()
                    .enumerate()
                    .map(|(j, c)| match c {
                        Column::Numeric(v) => {
                            if v[r].is_nan() {
                                "NA".to_string()
                            } else {
                                format!("{}", v[r])
                            }
                        }
                        Column::Categorical(v) => match v[r] {
                            Some(code) => self.levels[j][code as usize].clone(),
                            None => "NA".to_string(),
                        },
                        Column::Time => self.time_label(self.row_time(r)),
                    })
                    .collect()
            })
            .collect();
        LongTable { header, rows }
    }
}

/// Datasets compare equal when their schemas and long tables agree.
impl PartialEq for PanelDataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.to_long_table() == other.to_long_table()
    }
}

impl fmt::Display for PanelDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PanelDataset({} rows, {} units, {} periods)",
            self.n_rows(),
            self.n_units(),
            self.n_periods
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn oj_schema() -> Schema {
        Schema::new(
            vec![
                ColDef::new("store", DataType::Categorical),
                ColDef::new("brand", DataType::Categorical),
                ColDef::new("week", DataType::DateTime),
                ColDef::new("ln sales", DataType::Numeric).with_role(ColType::Outcome),
                ColDef::new("featured", DataType::Numeric).with_role(ColType::Treatment),
                ColDef::new("ln price", DataType::Numeric).with_role(ColType::Treatment),
                ColDef::new("HVAL150", DataType::Numeric),
            ],
            "week",
            vec!["store".into(), "brand".into()],
        )
        .unwrap()
    }

    fn table(rows: &[&str]) -> LongTable {
        LongTable {
            header: ["store", "brand", "week", "ln sales", "ln price", "featured", "HVAL150"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: rows
                .iter()
                .map(|r| r.split(',').map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    #[test]
    fn three_row_oj_table() {
        let t = table(&[
            "2,tropicana,40,9.01,1.2,0,0.46",
            "2,dominicks,40,8.5,0.9,1,0.46",
            "5,tropicana,41,9.3,1.1,0,0.53",
        ]);
        let ds = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.n_units(), 3);
        assert_eq!(ds.unit_key(0), vec!["2", "tropicana"]);
        assert_eq!(ds.levels("brand").unwrap(), &["tropicana", "dominicks"]);
        assert_eq!(ds.n_periods(), 2);
    }

    #[test]
    fn header_only_is_missing_data() {
        let t = table(&[]);
        let err = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap_err();
        assert!(matches!(err, DataError::MissingData));
    }

    #[test]
    fn duplicate_key_rejected() {
        let t = table(&["2,tropicana,40,9.01,1.2,0,0.46", "2,tropicana,40,9.3,1.1,0,0.46"]);
        let err = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap_err();
        assert!(matches!(err, DataError::DuplicateKey { .. }), "{err}");
    }

    #[test]
    fn missing_column_named() {
        let mut t = table(&["2,tropicana,40,9.01,1.2,0,0.46"]);
        t.header[6] = "income".into();
        match PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "HVAL150"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_numeric_reports_row_and_column() {
        let t = table(&["2,tropicana,40,9.01,abc,0,0.46"]);
        match PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t) {
            Err(DataError::TypeParseError { row, col, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(col, "ln price");
            }
            other => panic!("{other:?}"),
        }
        let t = table(&["2,tropicana,40,9.01,inf,0,0.46"]);
        assert!(PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).is_err());
    }

    #[test]
    fn na_cells_are_missing() {
        let t = table(&["2,tropicana,40,NA,1.2,,0.46"]);
        let ds = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap();
        assert!(ds.numeric("ln sales").unwrap()[0].is_nan());
        assert!(ds.numeric("featured").unwrap()[0].is_nan());
    }

    #[test]
    fn schema_invariants() {
        let base = |cols: Vec<ColDef>| Schema::new(cols, "t", vec!["u".into()]);
        let u = ColDef::new("u", DataType::Categorical);
        let t = ColDef::new("t", DataType::DateTime);
        let y = ColDef::new("y", DataType::Numeric).with_role(ColType::Outcome);
        let d = ColDef::new("d", DataType::Numeric).with_role(ColType::Treatment);
        assert!(base(vec![u.clone(), t.clone(), y.clone(), d.clone()]).is_ok());
        assert_eq!(
            base(vec![u.clone(), t.clone(), d.clone()]).unwrap_err(),
            SchemaError::NoOutcome
        );
        assert_eq!(
            base(vec![u.clone(), t.clone(), y.clone()]).unwrap_err(),
            SchemaError::NoTreatment
        );
        let cat_d = ColDef::new("d", DataType::Categorical).with_role(ColType::Treatment);
        assert!(matches!(
            base(vec![u.clone(), t.clone(), y.clone(), cat_d]),
            Err(SchemaError::NonNumericRole(_))
        ));
        assert!(matches!(
            base(vec![u.clone(), t.clone(), y.clone(), d.clone(), y.clone()]),
            Err(SchemaError::DuplicateColumn(_))
        ));
        assert!(matches!(
            Schema::new(vec![u.clone(), t.clone(), y.clone(), d.clone()], "t", vec![]),
            Err(SchemaError::NoPanelColumns)
        ));
        // The published snippet names the panel column "store id" while the
        // column itself is "store"; exact matching rejects it.
        assert!(matches!(
            Schema::new(vec![u, t, y, d], "t", vec!["u id".into()]),
            Err(SchemaError::UnknownPanelColumn(_))
        ));
    }

    #[test]
    fn slice_window_cases() {
        let t = table(&[
            "2,tropicana,40,9.01,1.2,0,0.46",
            "2,tropicana,41,9.02,1.2,0,0.46",
            "2,tropicana,42,9.03,1.2,0,0.46",
            "5,tropicana,42,9.3,1.1,0,0.53",
        ]);
        let ds = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap();
        assert_eq!(ds.slice_window(0, 2).unwrap(), ds);
        let one = ds.slice_window(1, 1).unwrap();
        assert_eq!(one.n_periods(), 1);
        assert_eq!(one.n_rows(), 1);
        assert_eq!(one.time_label(0), "41");
        assert!(matches!(ds.slice_window(5, 9), Err(DataError::EmptyWindow { .. })));
    }

    #[test]
    fn long_table_order_and_empty() {
        let t = table(&[
            "5,tropicana,41,9.3,1.1,0,0.53",
            "2,tropicana,41,9.02,1.2,0,0.46",
            "5,tropicana,40,9.1,1.1,0,0.53",
            "2,tropicana,40,9.01,1.2,0,0.46",
        ]);
        let ds = PanelDataset::from_table(oj_schema(), &IngestOptions::default(), &t).unwrap();
        let lt = ds.to_long_table();
        let keys: Vec<(String, String)> = lt.rows.iter().map(|r| (r[0].clone(), r[2].clone())).collect();
        // store "5" appeared first so it is unit 0
        assert_eq!(
            keys,
            vec![
                ("5".into(), "40".into()),
                ("5".into(), "41".into()),
                ("2".into(), "40".into()),
                ("2".into(), "41".into())
            ]
        );
        let empty = ds.select_rows(&[]);
        let et = empty.to_long_table();
        assert_eq!(et.header.len(), 7);
        assert!(et.rows.is_empty());
    }

    #[test]
    fn weekly_dates_map_to_grid() {
        let schema = oj_schema();
        let opts = IngestOptions {
            time_format: TimeFormat::Date(Granularity::Week),
            ..Default::default()
        };
        let t = table(&[
            "2,tropicana,2020-01-06,9.01,1.2,0,0.46",
            "2,tropicana,2020-01-20,9.02,1.2,0,0.46",
        ]);
        let ds = PanelDataset::from_table(schema.clone(), &opts, &t).unwrap();
        assert_eq!(ds.n_periods(), 3);
        assert_eq!(ds.row_at(0, 2), Some(1));
        assert_eq!(ds.row_at(0, 1), None);
        assert_eq!(ds.time_label(1), "2020-01-13");
        assert_eq!(ds.parse_time_label("2020-01-27"), Some(3));
        let bad = table(&[
            "2,tropicana,2020-01-06,9.01,1.2,0,0.46",
            "2,tropicana,2020-01-08,9.02,1.2,0,0.46",
        ]);
        assert!(matches!(
            PanelDataset::from_table(schema, &opts, &bad),
            Err(DataError::NonUniformTimeGrid(_))
        ));
    }
}
