mod common;

use common::*;
use dml_core::crossfit::*;
use dml_core::learners::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn ols() -> Learner {
    Learner::Ols(OlsParams::default())
}

#[test]
fn constant_target_predicted_everywhere() {
    let d = unit_design(gaussian(40, 2, 1), 4);
    let y = vec![3.25; 40];
    let rows: Vec<usize> = (0..40).collect();
    let units: Vec<u32> = (0..10).collect();
    let folds = assign_folds(&units, 2, 9).unwrap();
    let m = crossfit_fit(&d, &y, &rows, "y", &ols(), &folds, 0).unwrap();
    for p in m.predict(&d, &rows).unwrap() {
        assert!((p - 3.25).abs() < 1e-12);
    }
    // In-fold and hold-out rules agree for identical sub-models.
    let mean = m.predict_mean(&d, &rows).unwrap();
    for (a, b) in mean.iter().zip(m.predict(&d, &rows).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn leave_one_unit_out_never_sees_own_rows() {
    let per = 5;
    let d = unit_design(gaussian(30, 1, 2), per);
    let y = noise(30, 1.0, 3);
    let rows: Vec<usize> = (0..30).collect();
    let units: Vec<u32> = (0..6).collect();
    let folds = assign_folds(&units, 6, 4).unwrap();
    let m = crossfit_fit(&d, &y, &rows, "y", &ols(), &folds, 0).unwrap();
    for k in 0..6 {
        assert_eq!(folds.members(k).len(), 1);
        assert_eq!(m.train_counts[k], 30 - per);
        assert_eq!(m.sub_models[k].n_train, 30 - per);
    }
}

#[test]
fn noiseless_linear_sub_models_agree_with_oracle() {
    let x = gaussian(60, 3, 5);
    let beta = [1.5, -0.5, 2.0];
    let y: Vec<f64> = (0..60)
        .map(|i| 0.3 + (0..3).map(|j| beta[j] * x[(i, j)]).sum::<f64>())
        .collect();
    let d = unit_design(x, 6);
    let rows: Vec<usize> = (0..60).collect();
    let folds = assign_folds(&(0..10).collect::<Vec<u32>>(), 3, 6).unwrap();
    let m = crossfit_fit(&d, &y, &rows, "y", &ols(), &folds, 0).unwrap();
    for s in &m.sub_models {
        let (c, b0) = s.linear().unwrap();
        assert!((b0 - 0.3).abs() < 1e-8);
        for j in 0..3 {
            assert!((c[j] - beta[j]).abs() < 1e-8);
        }
    }
}

#[test]
fn in_fold_rows_use_their_own_sub_model() {
    let d = unit_design(gaussian(40, 2, 7), 4);
    let y = noise(40, 1.0, 8);
    let rows: Vec<usize> = (0..40).collect();
    let folds = assign_folds(&(0..10).collect::<Vec<u32>>(), 2, 3).unwrap();
    let m = crossfit_fit(&d, &y, &rows, "y", &ols(), &folds, 0).unwrap();
    let pred = m.predict(&d, &rows).unwrap();
    for (i, &r) in rows.iter().enumerate() {
        let k = folds.fold_of(d.keys[r].unit).unwrap();
        assert_eq!(pred[i], m.sub_models[k].predict(&d, &[r]).unwrap()[0]);
    }
}

#[test]
fn hold_out_rows_use_the_mean_of_sub_models() {
    // Unit 0 has y = 3, unit 1 has y = 1: the sub-model trained without
    // unit 0 predicts 1 and the other predicts 3. Unit 2 has no fold.
    let d = unit_design(DMatrix::zeros(6, 1), 2);
    let y = [3.0, 3.0, 1.0, 1.0, 0.0, 0.0];
    let folds = FoldAssignment {
        k: 2,
        seed: 0,
        units: vec![0, 1],
        folds: vec![0, 1],
    };
    let m = crossfit_fit(&d, &y, &[0, 1, 2, 3], "y", &Learner::Mean, &folds, 0).unwrap();
    assert_eq!(m.predict(&d, &[4, 5]).unwrap(), vec![2.0, 2.0]);
    assert_eq!(m.predict(&d, &[0, 2]).unwrap(), vec![1.0, 3.0]);
}

#[test]
fn unassigned_training_unit_is_an_error() {
    let d = unit_design(DMatrix::zeros(4, 1), 2);
    let folds = FoldAssignment {
        k: 2,
        seed: 0,
        units: vec![0, 5],
        folds: vec![0, 1],
    };
    let r = crossfit_fit(&d, &[1.0; 4], &[0, 1, 2, 3], "y", &Learner::Mean, &folds, 0);
    assert!(matches!(r, Err(CrossfitError::UnassignedUnit(1))));
}

#[test]
fn empty_training_complement_is_an_error() {
    let d = unit_design(DMatrix::zeros(4, 1), 2);
    let folds = assign_folds(&[0, 1], 2, 0).unwrap();
    // Only unit 0's rows are usable, so the sub-model without its fold has
    // nothing to learn from.
    let r = crossfit_fit(&d, &[1.0; 4], &[0, 1], "y", &Learner::Mean, &folds, 0);
    assert!(matches!(r, Err(CrossfitError::EmptyTrainingFold(_))));
}

#[test]
fn honesty_under_target_mutation() {
    // 2 folds, 20 units of 5 rows each.
    let d = unit_design(gaussian(100, 3, 11), 5);
    let y = noise(100, 1.0, 12);
    let rows: Vec<usize> = (0..100).collect();
    let folds = assign_folds(&(0..20).collect::<Vec<u32>>(), 2, 13).unwrap();
    let learner = Learner::LassoCv(LassoParams::default());
    let base = crossfit_fit(&d, &y, &rows, "y", &learner, &folds, 0)
        .unwrap()
        .predict(&d, &rows)
        .unwrap();
    for r in [0usize, 37, 99] {
        let mut y2 = y.clone();
        y2[r] += 1e3;
        let p = crossfit_fit(&d, &y2, &rows, "y", &learner, &folds, 0)
            .unwrap()
            .predict(&d, &[r])
            .unwrap();
        assert_eq!(p[0].to_bits(), base[r].to_bits());
    }
}

#[test]
fn stratified_assignment_spreads_strata() {
    let units: Vec<u32> = (0..30).collect();
    let strata: Vec<u32> = units.iter().map(|u| u / 3).collect();
    let a = assign_folds_stratified(&units, &strata, 5, 2).unwrap();
    for s in 0..10u32 {
        let mut f: Vec<usize> = (0..3).map(|i| a.fold_of(s * 3 + i).unwrap()).collect();
        f.sort();
        f.dedup();
        assert_eq!(f.len(), 3);
    }
    let sizes = a.fold_sizes();
    assert_eq!(sizes, vec![6; 5]);
    assert_eq!(a, assign_folds_stratified(&units, &strata, 5, 2).unwrap());
}

proptest! {
    #[test]
    fn folds_partition_units(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let units: Vec<u32> = (0..n as u32).map(|u| u * 3 + 1).collect();
        let a = assign_folds(&units, k, seed).unwrap();
        prop_assert_eq!(a.units.len(), n);
        let sizes = a.fold_sizes();
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for &u in &units {
            prop_assert!(a.fold_of(u).unwrap() < k);
        }
        let again = assign_folds(&units, k, seed).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn stratified_folds_balanced(n in 5usize..120, group in 1usize..6, seed in any::<u64>()) {
        let units: Vec<u32> = (0..n as u32).collect();
        let strata: Vec<u32> = units.iter().map(|u| u / group as u32).collect();
        let a = assign_folds_stratified(&units, &strata, 5, seed).unwrap();
        let sizes = a.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
