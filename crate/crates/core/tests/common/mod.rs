#![allow(dead_code)]

use dml_core::data_model::*;
use dml_core::design::{DesignMatrix, RowKey};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(n, p, |_, _| nd.sample(&mut r))
}

pub fn noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let nd = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| nd.sample(&mut r)).collect()
}

/// Store × brand × week panel with outcome `y`, treatments `d0..`, and one
/// numeric feature `x`; values are standard normal draws.
pub fn toy_panel(stores: usize, brands: usize, weeks: usize, treatments: usize, seed: u64) -> PanelDataset {
    let mut r = rng(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let mut header: Vec<String> = ["store", "brand", "week", "y"].iter().map(|s| s.to_string()).collect();
    header.extend((0..treatments).map(|i| format!("d{i}")));
    header.push("x".into());
    let mut rows = Vec::new();
    for s in 0..stores {
        for b in 0..brands {
            for w in 0..weeks {
                let mut row = vec![format!("s{s}"), format!("b{b}"), (w + 1).to_string()];
                for _ in 0..treatments + 2 {
                    let v: f64 = nd.sample(&mut r);
                    row.push(v.to_string());
                }
                rows.push(row);
            }
        }
    }
    from_rows(header, rows, treatments)
}

pub fn toy_schema(treatments: usize) -> Schema {
    let mut cols = vec![
        ColDef::new("store", DataType::Categorical),
        ColDef::new("brand", DataType::Categorical),
        ColDef::new("week", DataType::DateTime),
        ColDef::new("y", DataType::Numeric).with_role(ColType::Outcome),
    ];
    for i in 0..treatments {
        cols.push(ColDef::new(format!("d{i}"), DataType::Numeric).with_role(ColType::Treatment));
    }
    cols.push(ColDef::new("x", DataType::Numeric));
    Schema::new(cols, "week", vec!["store".into(), "brand".into()]).unwrap()
}

pub fn from_rows(header: Vec<String>, rows: Vec<Vec<String>>, treatments: usize) -> PanelDataset {
    PanelDataset::from_table(toy_schema(treatments), &IngestOptions::default(), &LongTable { header, rows })
        .unwrap()
}

/// Design keyed so that rows `u*per..(u+1)*per` belong to unit `u`.
pub fn unit_design(x: DMatrix<f64>, per: usize) -> DesignMatrix {
    let n = x.nrows();
    let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    let keys = (0..n).map(|i| RowKey::new(i / per, i % per, 0)).collect();
    DesignMatrix::new(x, names, keys)
}
