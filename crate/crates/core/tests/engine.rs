mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::*;
use dml_core::crossfit::CrossFitModel;
use dml_core::data_model::PanelDataset;
use dml_core::design::RowKey;
use dml_core::engine::*;
use dml_core::featurize::{scoring_rows, FeatureBuilder};
use dml_core::learners::{Learner, OlsParams, PredictionTable};
use dml_core::treatments::{OwnVar, TreatmentBuilder};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn ols() -> Learner {
    Learner::Ols(OlsParams::default())
}

fn own(t: &str) -> TreatmentBuilder {
    TreatmentBuilder::Own(OwnVar::new(t))
}

fn x_feature() -> Vec<FeatureBuilder> {
    vec![FeatureBuilder::Numeric { col: "x".into() }]
}

fn spec(features: Vec<FeatureBuilder>, treatments: Vec<TreatmentBuilder>, opts: DdmlOptions) -> DynamicDml {
    DynamicDml {
        feature_builders: features,
        baseline: ols(),
        treatments,
        causal: ols(),
        options: opts,
    }
}

/// OLS slope of `y` on `x` with an intercept.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn perfect_outcome_predictions_give_zero_effect() {
    let ds = toy_panel(3, 2, 6, 1, 1);
    let y = ds.numeric("y").unwrap();
    let mut t = PredictionTable::new(Vec::new(), Vec::new());
    for r in 0..ds.n_rows() {
        let key = RowKey::new(ds.row_unit(r), ds.row_time(r), 0);
        t.insert("y", key, y[r]);
        t.insert("d0", key, 0.0);
    }
    let mut m = spec(x_feature(), vec![own("d0")], DdmlOptions::default());
    m.baseline = Learner::PrePredicted(Arc::new(t));
    m.options.k = 2;
    let fit = m.fit(&ds).unwrap();
    assert!(fit.design.y.iter().all(|&v| v == 0.0));
    assert_eq!(fit.beta, vec![0.0]);
    assert!(fit.get_coefficients().iter().all(|(_, b)| *b == 0.0));
}

#[test]
fn two_fold_oracle() {
    // Intercept-only baseline: each sub-model is the training-fold mean, so
    // residuals are deviations from the other fold's mean.
    let ds = toy_panel(4, 3, 5, 1, 2);
    let opts = DdmlOptions {
        k: 2,
        seed: 9,
        ..Default::default()
    };
    let mut m = spec(x_feature(), vec![own("d0")], opts);
    m.baseline = Learner::Mean;
    let fit = m.fit(&ds).unwrap();
    let (y, d) = (ds.numeric("y").unwrap(), ds.numeric("d0").unwrap());
    let fold = |r: usize| fit.folds.fold_of(ds.row_unit(r) as u32).unwrap();
    let mean_out = |v: &[f64], k: usize| {
        let rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| fold(r) != k).collect();
        rows.iter().map(|&r| v[r]).sum::<f64>() / rows.len() as f64
    };
    let (my, md) = ([mean_out(y, 0), mean_out(y, 1)], [mean_out(d, 0), mean_out(d, 1)]);
    let yt: Vec<f64> = (0..ds.n_rows()).map(|r| y[r] - my[fold(r)]).collect();
    let dt: Vec<f64> = (0..ds.n_rows()).map(|r| d[r] - md[fold(r)]).collect();
    assert!((fit.beta[0] - slope(&dt, &yt)).abs() < 1e-10);
}

#[test]
fn single_lead_one() {
    let ds = toy_panel(3, 2, 8, 1, 3);
    let opts = DdmlOptions {
        min_lead: 1,
        max_lead: 1,
        k: 3,
        ..Default::default()
    };
    let fit = spec(x_feature(), vec![own("d0")], opts).fit(&ds).unwrap();
    assert_eq!(fit.names, vec!["d0"]);
    assert_eq!(fit.residuals.series_ids(), vec![("y".into(), 1), ("d0".into(), 1)]);
    assert!(fit.design.z.keys.iter().all(|k| k.lead == 1));
    // One reference date per unit is lost to the lead.
    assert_eq!(fit.n_effective, ds.n_units() * (ds.n_periods() - 1));
    assert_eq!(fit.first_stage.len(), 2);
}

#[test]
fn invalid_options() {
    let ds = toy_panel(2, 2, 4, 1, 4);
    let mut opts = DdmlOptions::default();
    opts.min_lead = 2;
    opts.max_lead = 1;
    assert!(matches!(
        spec(x_feature(), vec![own("d0")], opts).fit(&ds),
        Err(EngineError::InvalidOptions(_))
    ));
    let opts = DdmlOptions {
        k: 1,
        ..Default::default()
    };
    assert!(matches!(
        spec(x_feature(), vec![own("d0")], opts).fit(&ds),
        Err(EngineError::InvalidOptions(_))
    ));
}

#[test]
fn textbook_standard_error() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.1, 3.9, 6.2, 7.8, 10.1];
    let b = slope(&x, &y);
    let a = 3.0 * (1.0 - b) + (y.iter().sum::<f64>() / 5.0 - 3.0);
    let e: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| yi - a - b * xi).collect();
    let s2 = e.iter().map(|v| v * v).sum::<f64>() / 3.0;
    let expected = s2 / 10.0;
    let z = DMatrix::from_column_slice(5, 1, &x);
    let cov = ols_covariance(&z, &e, true, SeType::Classical).unwrap();
    assert!((cov[(0, 0)] - expected).abs() < 1e-10);
}

#[test]
fn duplicated_rows_shrink_se() {
    let n = 1000;
    let x = noise(n, 1.0, 5);
    let eps = noise(n, 1.0, 6);
    let y: Vec<f64> = x.iter().zip(&eps).map(|(a, e)| 1.0 + 2.0 * a + e).collect();
    let se = |x: &[f64], y: &[f64]| {
        let b = slope(x, y);
        let m = x.len() as f64;
        let a = y.iter().sum::<f64>() / m - b * x.iter().sum::<f64>() / m;
        let e: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - a - b * xi).collect();
        let z = DMatrix::from_column_slice(x.len(), 1, x);
        ols_covariance(&z, &e, true, SeType::Classical).unwrap()[(0, 0)].sqrt()
    };
    let (x2, y2) = ([x.clone(), x.clone()].concat(), [y.clone(), y.clone()].concat());
    let ratio = se(&x2, &y2) / se(&x, &y);
    let exact = ((n as f64 - 2.0) / (2.0 * n as f64 - 2.0)).sqrt();
    assert!((ratio - exact).abs() < 1e-10);
    assert!((ratio - 0.5f64.sqrt()).abs() < 1e-3);
}

#[test]
fn hc1_agrees_under_homoskedasticity() {
    let n = 5000;
    let z = gaussian(n, 2, 7);
    let e = noise(n, 1.5, 8);
    let c = ols_covariance(&z, &e, true, SeType::Classical).unwrap();
    let h = ols_covariance(&z, &e, true, SeType::Hc1).unwrap();
    for j in 0..2 {
        let r = (h[(j, j)] / c[(j, j)]).sqrt();
        assert!((0.8..=1.25).contains(&r), "ratio {r}");
    }
}

#[test]
fn covariance_errors() {
    let z = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
    assert!(matches!(
        ols_covariance(&z, &[0.1, 0.2, 0.3], true, SeType::Classical),
        Err(EngineError::RankDeficient(_))
    ));
    let z = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 3.0, 5.0, 2.0, 4.0, 6.0, 10.0]);
    assert!(matches!(
        ols_covariance(&z, &[0.1, 0.2, 0.3, 0.4], true, SeType::Hc1),
        Err(EngineError::RankDeficient(_))
    ));
}

#[test]
fn second_stage_rank_deficiency() {
    // Two builders on identical treatment columns give dependent columns.
    let ds = toy_panel(3, 2, 5, 2, 10);
    let mut t = ds.to_long_table();
    let (i0, i1) = (
        t.header.iter().position(|h| h == "d0").unwrap(),
        t.header.iter().position(|h| h == "d1").unwrap(),
    );
    for r in &mut t.rows {
        r[i1] = r[i0].clone();
    }
    let ds = from_rows(t.header, t.rows, 2);
    let err = spec(x_feature(), vec![own("d0"), own("d1")], DdmlOptions::default())
        .fit(&ds)
        .unwrap_err();
    assert!(matches!(err, EngineError::SecondStageRankDeficient(_)), "{err:?}");
}

/// Mean of the sub-model predictions at the last reference date, computed
/// outside the engine.
fn g_hat(fit: &DmlFit, ds: &PanelDataset, features: &[FeatureBuilder], var: &str, lead: usize) -> Vec<f64> {
    let f = fit
        .saved
        .first_stage
        .iter()
        .find(|f| f.variable == var && f.lead == lead)
        .unwrap();
    let m = CrossFitModel {
        sub_models: f.sub_models.clone(),
        folds: fit.folds.clone(),
        train_counts: Vec::new(),
    };
    let sr = scoring_rows(ds, features, lead, ds.n_periods() - 1).unwrap();
    let rows: Vec<usize> = (0..sr.nrows()).collect();
    let p = m.predict_mean(&sr.design, &rows).unwrap();
    let mut out = vec![f64::NAN; ds.n_units()];
    for (k, v) in sr.design.keys.iter().zip(p) {
        out[k.unit as usize] = v;
    }
    out
}

fn lead_one() -> DdmlOptions {
    DdmlOptions {
        min_lead: 1,
        max_lead: 1,
        k: 3,
        ..Default::default()
    }
}

#[test]
fn forecast_surprises() {
    let ds = toy_panel(3, 2, 8, 1, 11);
    let feats = x_feature();
    let tb = vec![own("d0")];
    let fit = spec(feats.clone(), tb.clone(), lead_one()).fit(&ds).unwrap();
    let g = g_hat(&fit, &ds, &feats, "d0", 1);
    let t_next = ds.n_periods() as i64;
    let plan = |shift: f64| -> TreatmentPlan {
        (0..ds.n_units())
            .map(|u| (("d0".to_string(), u, t_next), g[u] + shift))
            .collect()
    };
    let at_g = fit.forecast(&ds, &feats, &tb, &plan(0.0)).unwrap();
    assert_eq!(at_g.len(), ds.n_units());
    for r in &at_g {
        assert_eq!(r.adjusted, r.baseline);
        assert_eq!(r.outcome_time, ds.n_periods());
    }
    // Unplanned treatments carry no surprise either.
    let none = fit.forecast(&ds, &feats, &tb, &HashMap::new()).unwrap();
    assert!(none.iter().all(|r| r.adjusted == r.baseline));
    let up = fit.forecast(&ds, &feats, &tb, &plan(1.0)).unwrap();
    for (a, b) in up.iter().zip(&at_g) {
        assert!((a.adjusted - (b.baseline + fit.beta[0])).abs() < 1e-12);
    }
}

#[test]
fn forecast_two_treatments() {
    let ds = toy_panel(3, 2, 8, 2, 12);
    let feats = x_feature();
    let tb = vec![own("d0"), own("d1")];
    let fit = spec(feats.clone(), tb.clone(), lead_one()).fit(&ds).unwrap();
    let g0 = g_hat(&fit, &ds, &feats, "d0", 1);
    let g1 = g_hat(&fit, &ds, &feats, "d1", 1);
    let t_next = ds.n_periods() as i64;
    let mut plan = TreatmentPlan::new();
    for u in 0..ds.n_units() {
        plan.insert(("d0".into(), u, t_next), g0[u]);
        plan.insert(("d1".into(), u, t_next), g1[u] + 0.7);
    }
    let rows = fit.forecast(&ds, &feats, &tb, &plan).unwrap();
    let b1 = fit.coefficient("d1").unwrap();
    for r in &rows {
        assert!((r.adjusted - r.baseline - 0.7 * b1).abs() < 1e-12);
    }
    for u in 0..ds.n_units() {
        plan.insert(("d0".into(), u, t_next), g0[u] - 0.3);
    }
    let rows = fit.forecast(&ds, &feats, &tb, &plan).unwrap();
    let manual = fit.beta[0] * -0.3 + fit.beta[1] * 0.7;
    for r in &rows {
        assert!((r.adjusted - r.baseline - manual).abs() < 1e-12);
    }
}

#[test]
fn forecast_lead_out_of_range() {
    let ds = toy_panel(2, 2, 6, 1, 13);
    let feats = x_feature();
    let tb = vec![own("d0")];
    let fit = spec(feats.clone(), tb.clone(), lead_one()).fit(&ds).unwrap();
    let mut plan = TreatmentPlan::new();
    plan.insert(("d0".into(), 0, ds.n_periods() as i64 + 1), 1.0);
    assert!(matches!(
        fit.forecast(&ds, &feats, &tb, &plan),
        Err(EngineError::LeadOutOfRange { lead: 2, .. })
    ));
}

#[test]
fn fwl_examples() {
    let n = 120;
    let x = gaussian(n, 3, 14);
    let d = gaussian(n, 2, 15);
    let e = noise(n, 1.0, 16);
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 2.0 * d[(i, 0)] - d[(i, 1)] + x[(i, 0)] + 0.5 * x[(i, 2)] + e[i])
        .collect();
    let (b, full) = fwl_matrices(&y, &d, &x).unwrap();
    for (u, v) in b.iter().zip(&full) {
        assert!((u - v).abs() < 1e-8 * v.abs().max(1.0));
    }
    // No confounders: the simple regression slope.
    let d1 = DMatrix::from_column_slice(n, 1, d.column(0).as_slice());
    let (b, _) = fwl_matrices(&y, &d1, &DMatrix::zeros(n, 0)).unwrap();
    let dc: Vec<f64> = d.column(0).iter().copied().collect();
    assert!((b[0] - slope(&dc, &y)).abs() < 1e-10);

    // D orthogonal to [1, X]: residualizing D leaves it unchanged and the
    // estimate equals the simple slope.
    let xc = DMatrix::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let dv = DMatrix::from_fn(n, 1, |i, _| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 });
    let y: Vec<f64> = (0..n).map(|i| 3.0 * dv[(i, 0)] + 2.0 * xc[(i, 0)] + e[i]).collect();
    let (b, _) = fwl_matrices(&y, &dv, &xc).unwrap();
    let dvv: Vec<f64> = dv.column(0).iter().copied().collect();
    assert!((b[0] - slope(&dvv, &y)).abs() < 1e-10);
}

#[test]
fn fwl_on_dataset() {
    let ds = toy_panel(3, 2, 10, 1, 17);
    let (b, full) = fwl_estimate(&ds, &["x"]).unwrap();
    assert!((b[0] - full[0]).abs() < 1e-8);
    assert!(matches!(
        fwl_estimate(&ds, &["nope"]),
        Err(EngineError::UnknownColumn(_))
    ));
}

#[test]
fn identical_across_thread_counts() {
    let ds = toy_panel(4, 3, 10, 1, 18);
    let opts = DdmlOptions {
        min_lead: 0,
        max_lead: 2,
        k: 3,
        seed: 5,
        ..Default::default()
    };
    let m = spec(x_feature(), vec![own("d0")], opts);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| m.fit(&ds).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.beta, b.beta);
    assert_eq!(a.get_standard_errors().unwrap(), b.get_standard_errors().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fwl_equivalence(n in 20usize..120, pd in 1usize..3, px in 0usize..6, seed in 0u64..1000) {
        let d = gaussian(n, pd, seed);
        let x = gaussian(n, px, seed + 1);
        let y = noise(n, 1.0, seed + 2);
        let (b, full) = fwl_matrices(&y, &d, &x).unwrap();
        for (u, v) in b.iter().zip(&full) {
            prop_assert!((u - v).abs() <= 1e-8 * v.abs().max(1.0));
        }
    }

    #[test]
    fn covariance_is_psd(n in 10usize..80, p in 1usize..4, hc1 in any::<bool>(), seed in 0u64..1000) {
        let z = gaussian(n, p, seed);
        let e = noise(n, 1.0, seed + 1);
        let se = if hc1 { SeType::Hc1 } else { SeType::Classical };
        let c = ols_covariance(&z, &e, true, se).unwrap();
        prop_assert!((c.clone() - c.transpose()).abs().max() < 1e-14);
        let eig = c.clone().symmetric_eigen();
        let tr: f64 = c.diagonal().sum();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12 * tr));
    }
}
