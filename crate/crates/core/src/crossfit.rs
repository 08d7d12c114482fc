//! K-fold cross-fitting over panel units.
//!
//! Sub-model `k` is trained on every row whose unit is not in fold `k`. A row
//! of a unit in fold `k` is scored by sub-model `k` alone; rows of units that
//! were never assigned a fold are scored by the mean of all sub-models.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{LongTable, PanelDataset};
use crate::design::DesignMatrix;
use crate::learners::{FitContext, FittedLearner, Learner, LearnerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrossfitError {
    #[error("InvalidFoldCount: K must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("TooFewUnits: {units} units cannot fill {k} folds")]
    TooFewUnits { units: usize, k: usize },
    #[error("EmptyTrainingFold: the complement of fold {0} has no usable rows")]
    EmptyTrainingFold(usize),
    #[error("UnassignedUnit: unit {0} has no fold")]
    UnassignedUnit(u32),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for sub-stream `stream` of `seed`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Shuffles `0..n` with a seeded generator and deals the permutation
/// round-robin into `k` folds. Returns the fold of each item.
pub fn deal_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (i, &item) in perm.iter().enumerate() {
        fold[item] = i % k;
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Distinct unit ids, ascending.
    pub units: Vec<u32>,
    /// Fold of each entry of `units`.
    pub folds: Vec<usize>,
}

pub fn assign_folds(units: &[u32], k: usize, seed: u64) -> Result<FoldAssignment, CrossfitError> {
    if k < 2 {
        return Err(CrossfitError::InvalidFoldCount(k));
    }
    let mut u = units.to_vec();
    u.sort_unstable();
    u.dedup();
    if u.len() < k {
        return Err(CrossfitError::TooFewUnits { units: u.len(), k });
    }
    let folds = deal_folds(u.len(), k, seed);
    Ok(FoldAssignment {
        k,
        seed,
        units: u,
        folds,
    })
}

/// Like [`assign_folds`], but units sharing a stratum are dealt to
/// consecutive folds, so a stratum with at most `k` units never has two
/// units in one fold. `strata[i]` is the stratum of `units[i]`.
pub fn assign_folds_stratified(
    units: &[u32],
    strata: &[u32],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, CrossfitError> {
    if k < 2 {
        return Err(CrossfitError::InvalidFoldCount(k));
    }
    let mut pairs: Vec<(u32, u32)> = units.iter().copied().zip(strata.iter().copied()).collect();
    pairs.sort_unstable();
    pairs.dedup_by_key(|p| p.0);
    if pairs.len() < k {
        return Err(CrossfitError::TooFewUnits { units: pairs.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.1).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut rng);
    let mut order = Vec::with_capacity(pairs.len());
    for mut members in groups {
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut folds = vec![0; pairs.len()];
    for (i, &idx) in order.iter().enumerate() {
        folds[idx] = i % k;
    }
    Ok(FoldAssignment {
        k,
        seed,
        units: pairs.into_iter().map(|p| p.0).collect(),
        folds,
    })
}

impl FoldAssignment {
    pub fn fold_of(&self, unit: u32) -> Option<usize> {
        self.units.binary_search(&unit).ok().map(|i| self.folds[i])
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }

    /// Units of fold `k`.
    pub fn members(&self, k: usize) -> Vec<u32> {
        self.units
            .iter()
            .zip(&self.folds)
            .filter(|(_, &f)| f == k)
            .map(|(&u, _)| u)
            .collect()
    }

    /// `(unit keys..., fold)` rows for audit.
    pub fn to_long_table(&self, ds: &PanelDataset) -> LongTable {
        let mut header: Vec<String> = ds.schema().panel_colnames().to_vec();
        header.push("fold".into());
        let rows = self
            .units
            .iter()
            .zip(&self.folds)
            .map(|(&u, &f)| {
                let mut r: Vec<String> =
                    ds.unit_key(u as usize).into_iter().map(String::from).collect();
                r.push(f.to_string());
                r
            })
            .collect();
        LongTable { header, rows }
    }
}

#[derive(Debug, Clone)]
pub struct CrossFitModel {
    pub sub_models: Vec<FittedLearner>,
    pub folds: FoldAssignment,
    pub train_counts: Vec<usize>,
}

/// Fits one sub-model per fold on the complement of that fold. `rows`
/// selects the usable rows of `d` (finite target).
pub fn crossfit_fit(
    d: &DesignMatrix,
    y: &[f64],
    rows: &[usize],
    target: &str,
    learner: &Learner,
    folds: &FoldAssignment,
    stream: u64,
) -> Result<CrossFitModel, CrossfitError> {
    let mut row_fold = Vec::with_capacity(rows.len());
    for &r in rows {
        let u = d.keys[r].unit;
        row_fold.push(folds.fold_of(u).ok_or(CrossfitError::UnassignedUnit(u))?);
    }
    let fits: Vec<Result<(FittedLearner, usize), CrossfitError>> = (0..folds.k)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = rows
                .iter()
                .zip(&row_fold)
                .filter(|(_, &f)| f != k)
                .map(|(&r, _)| r)
                .collect();
            if train.is_empty() {
                return Err(CrossfitError::EmptyTrainingFold(k));
            }
            let ctx = FitContext {
                target,
                stream: mix_seed(stream, k as u64),
            };
            Ok((learner.fit(d, y, &train, &ctx)?, train.len()))
        })
        .collect();
    let mut sub_models = Vec::with_capacity(folds.k);
    let mut train_counts = Vec::with_capacity(folds.k);
    for f in fits {
        let (m, n) = f?;
        sub_models.push(m);
        train_counts.push(n);
    }
    debug!("cross-fit '{target}': training rows per sub-model {train_counts:?}");
    Ok(CrossFitModel {
        sub_models,
        folds: folds.clone(),
        train_counts,
    })
}

impl CrossFitModel {
    /// Scores `rows` of `d`: in-fold rows by their own fold's sub-model,
    /// rows of unassigned units by the mean over sub-models.
    pub fn predict(&self, d: &DesignMatrix, rows: &[usize]) -> Result<Vec<f64>, LearnerError> {
        let mut out = vec![0.0; rows.len()];
        let mut by_fold: Vec<Vec<usize>> = vec![Vec::new(); self.folds.k];
        let mut holdout = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            match self.folds.fold_of(d.keys[r].unit) {
                Some(f) => by_fold[f].push(i),
                None => holdout.push(i),
            }
        }
        for (k, idx) in by_fold.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let rr: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
            let p = self.sub_models[k].predict(d, &rr)?;
            for (&i, v) in idx.iter().zip(p) {
                out[i] = v;
            }
        }
        if !holdout.is_empty() {
            let rr: Vec<usize> = holdout.iter().map(|&i| rows[i]).collect();
            let p = self.predict_mean(d, &rr)?;
            for (&i, v) in holdout.iter().zip(p) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    /// Mean of all sub-model predictions (the hold-out rule). When every
    /// sub-model returns the same value it is passed through unchanged.
    pub fn predict_mean(&self, d: &DesignMatrix, rows: &[usize]) -> Result<Vec<f64>, LearnerError> {
        let preds = self
            .sub_models
            .iter()
            .map(|m| m.predict(d, rows))
            .collect::<Result<Vec<_>, _>>()?;
        let k = preds.len() as f64;
        Ok((0..rows.len())
            .map(|i| {
                let first = preds[0][i];
                if preds.iter().all(|p| p[i] == first) {
                    first
                } else {
                    preds.iter().map(|p| p[i]).sum::<f64>() / k
                }
            })
            .collect())
    }
}
