//! Artifact formatting: numbers with 12 significant digits, CSV and text
//! tables.

use std::path::Path;

use dml_core::data_model::LongTable;

use crate::CliError;

/// `v` rounded to 12 significant digits, in plain notation when that is
/// short and exponent notation otherwise.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let r: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    if (1e-6..1e15).contains(&r.abs()) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

pub fn write_table(dir: &Path, name: &str, table: &LongTable) -> Result<(), CliError> {
    let p = dir.join(name);
    table
        .write_csv_path(&p)
        .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Left-aligned first column, right-aligned others.
pub fn render(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}
