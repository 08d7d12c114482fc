//! The four subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dml_core::data_model::{load_csv, read_table, LongTable, PanelDataset};
use dml_core::diagnostics::{diagnose, DiagnosticsReport};
use dml_core::engine::{DmlFit, DynamicDml, SavedModel, SeType, TreatmentPlan};
use dml_core::synth;
use log::info;

use crate::config::{LearnerConfig, RunConfig};
use crate::output::{header, num, render, write_table, write_text};
use crate::CliError;

pub struct Globals {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(config: &Path, g: &Globals) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = g.seed {
        cfg.options.seed = s;
        if let Some(sy) = cfg.synth.as_mut() {
            sy.seed = s;
        }
    }
    Ok((cfg, base_dir(config)))
}

fn out_dir(g: &Globals, cfg: &RunConfig, base: &Path) -> Result<PathBuf, CliError> {
    let dir = match (&g.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => {
            return Err(CliError::Config(
                "missing field `output_dir` (or pass --out)".into(),
            ))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig, base: &Path) -> Result<PanelDataset, CliError> {
    let path = cfg
        .data_path(base)
        .ok_or_else(|| CliError::Config("missing field `data`".into()))?;
    load_csv(&path, cfg.schema()?, &cfg.ingest_options())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn estimate(cfg: &RunConfig, base: &Path, ds: &PanelDataset) -> Result<DmlFit, CliError> {
    let model = DynamicDml {
        feature_builders: cfg.feature_builders(ds)?,
        baseline: cfg.baseline.build(Some(ds), base)?,
        treatments: cfg.builders(),
        causal: cfg.causal.build(Some(ds), base)?,
        options: cfg.ddml_options(),
    };
    model.fit(ds).map_err(|e| CliError::Estimation(e.to_string()))
}

/// Config with every path made absolute and the output directory dropped,
/// enough to reproduce the run from anywhere.
fn snapshot(cfg: &RunConfig, base: &Path) -> RunConfig {
    let abs = |p: &Path| {
        let j = base.join(p);
        std::fs::canonicalize(&j).unwrap_or(j)
    };
    let mut s = cfg.clone();
    s.data = cfg.data.as_deref().map(abs);
    s.output_dir = None;
    for l in [&mut s.baseline, &mut s.causal] {
        if let LearnerConfig::PrePredicted { path } = l {
            *path = abs(path);
        }
    }
    s
}

fn coefficient_rows(fit: &DmlFit, threshold: f64) -> Vec<Vec<String>> {
    fit.names
        .iter()
        .zip(&fit.beta)
        .map(|(name, &b)| {
            let (se, t, star) = match fit.standard_error(name) {
                Some(se) => {
                    let t = b / se;
                    let star = if t.abs() > threshold { "*" } else { "" };
                    (num(se), num(t), star.to_string())
                }
                None => ("NA".into(), "NA".into(), String::new()),
            };
            vec![name.clone(), num(b), se, t, star]
        })
        .collect()
}

fn unit_cols(ds: &PanelDataset, unit: usize) -> Vec<String> {
    ds.unit_key(unit).into_iter().map(String::from).collect()
}

fn write_fit(dir: &Path, cfg: &RunConfig, base: &Path, ds: &PanelDataset, fit: &DmlFit) -> Result<(), CliError> {
    let schema = ds.schema();
    let snap = toml::to_string(&snapshot(cfg, base))
        .map_err(|e| CliError::Config(format!("config snapshot: {e}")))?;
    write_text(dir, "config.toml", &snap)?;

    let rows = coefficient_rows(fit, cfg.significance);
    write_table(
        dir,
        "coefficients.csv",
        &LongTable {
            header: header(&["name", "coefficient", "std_error", "t_stat", "significant"]),
            rows,
        },
    )?;
    if let Some(c) = &fit.covariance {
        let mut h = vec!["name".to_string()];
        h.extend(fit.se_names.iter().cloned());
        let rows = fit
            .se_names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut r = vec![n.clone()];
                r.extend((0..c.ncols()).map(|j| num(c[(i, j)])));
                r
            })
            .collect();
        write_table(dir, "covariance.csv", &LongTable { header: h, rows })?;
    }
    let rows = fit
        .first_stage
        .iter()
        .map(|m| {
            vec![
                m.variable.clone(),
                m.lead.to_string(),
                m.n_rows.to_string(),
                m.n_features.to_string(),
                num(m.oof_rmse),
                num(m.oof_r2),
                num(m.mean_train_r2),
            ]
        })
        .collect();
    write_table(
        dir,
        "first_stage.csv",
        &LongTable {
            header: header(&[
                "variable",
                "lead",
                "n_rows",
                "n_features",
                "oof_rmse",
                "oof_r2",
                "mean_train_r2",
            ]),
            rows,
        },
    )?;
    write_table(dir, "folds.csv", &fit.folds.to_long_table(ds))?;
    write_table(dir, "residuals.csv", &fit.residuals.to_long_table(ds, num))?;
    write_table(dir, "second_stage.csv", &fit.design.to_long_table(ds, num))?;
    write_text(dir, "columns.json", &fit.design.meta_json())?;
    let model = serde_json::to_string(&fit.saved)
        .map_err(|e| CliError::Estimation(format!("model serialization: {e}")))?;
    write_text(dir, "model.json", &model)?;
    info!("wrote run directory {} ({} panel columns)", dir.display(), schema.panel_colnames().len());
    Ok(())
}

/// Writes the diagnostics files and returns the summary text and the
/// number of warnings.
fn write_diagnostics(
    dir: &Path,
    cfg: &RunConfig,
    ds: &PanelDataset,
    fit: &DmlFit,
) -> Result<(String, usize), CliError> {
    let expected = cfg.diagnostics.expected();
    let rep: DiagnosticsReport = diagnose(fit, cfg.diagnostics.top_k, &expected, cfg.significance)
        .map_err(|e| CliError::Estimation(format!("diagnostics: {e}")))?;
    let schema = ds.schema();
    let mut summary = String::new();
    let se = match fit.se_type {
        SeType::Classical => "classical",
        SeType::Hc1 => "HC1",
    };
    let approx = if fit.se_approximate { ", approximate" } else { "" };
    summary.push_str(&format!("second stage: n = {}, {se} standard errors{approx}\n", fit.n_effective));
    let mut rows = vec![header(&["name", "coefficient", "std_error", "t_stat", ""])];
    rows.extend(coefficient_rows(fit, cfg.significance));
    summary.push_str(&render(&rows));
    summary.push_str(&format!("* |t| > {}\n", cfg.significance));
    summary.push_str(
        "Effects are causal only if every confounder of outcome and treatment is in the feature set.\n\n",
    );

    summary.push_str("first stage (out of fold)\n");
    let mut rows = vec![header(&["variable", "lead", "rows", "features", "rmse", "r2"])];
    rows.extend(fit.first_stage.iter().map(|m| {
        vec![
            m.variable.clone(),
            m.lead.to_string(),
            m.n_rows.to_string(),
            m.n_features.to_string(),
            num(m.oof_rmse),
            num(m.oof_r2),
        ]
    }));
    summary.push_str(&render(&rows));
    summary.push('\n');

    let v = &rep.vif;
    let mut top: Option<(f64, usize, usize)> = None;
    for i in 0..v.names.len() {
        for j in i + 1..v.names.len() {
            let r = v.corr[(i, j)].abs();
            if top.is_none_or(|(best, _, _)| r > best) {
                top = Some((r, i, j));
            }
        }
    }
    if let Some((r, i, j)) = top {
        summary.push_str(&format!(
            "largest treatment correlation: |r| = {} between '{}' and '{}'\n",
            num(r),
            v.names[i],
            v.names[j]
        ));
    }
    let mut h = header(&["name", "classical_vif"]);
    h.extend(v.names.iter().cloned());
    let rows = v
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut r = vec![n.clone(), num(v.classical_vif[i])];
            r.extend((0..v.names.len()).map(|j| num(v.corr[(i, j)])));
            r
        })
        .collect();
    write_table(dir, "vif.csv", &LongTable { header: h, rows })?;

    if let Some(inf) = &rep.influence {
        let mut h: Vec<String> = schema.panel_colnames().to_vec();
        h.push(schema.time_colname().to_string());
        h.extend(header(&["lead", "leverage", "cooks_d"]));
        h.extend(fit.names.iter().map(|n| format!("dfbeta:{n}")));
        let rows = fit
            .design
            .z
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut r = unit_cols(ds, k.unit as usize);
                r.push(ds.time_label(k.time as usize));
                r.push(k.lead.to_string());
                r.push(num(inf.leverage[i]));
                r.push(num(inf.cooks_d[i]));
                r.extend((0..fit.names.len()).map(|j| num(inf.dfbeta[(i, j)])));
                r
            })
            .collect();
        write_table(dir, "influence.csv", &LongTable { header: h, rows })?;
        let mut at = None;
        for (i, &d) in inf.cooks_d.iter().enumerate() {
            if at.is_none_or(|a: usize| d > inf.cooks_d[a]) {
                at = Some(i);
            }
        }
        if let Some(i) = at {
            let k = fit.design.z.keys[i];
            summary.push_str(&format!(
                "max Cook's distance: {} at {} {} lead {}\n",
                num(inf.cooks_d[i]),
                ds.unit_label(k.unit as usize),
                ds.time_label(k.time as usize),
                k.lead
            ));
        }
        if !inf.leverage_one.is_empty() {
            summary.push_str(&format!("rows with leverage one: {}\n", inf.leverage_one.len()));
        }
    }

    let mut h = header(&["variable", "lead"]);
    h.extend(schema.panel_colnames().iter().cloned());
    h.push(schema.time_colname().to_string());
    h.extend(header(&["actual", "predicted", "residual"]));
    let rows = rep
        .outliers
        .iter()
        .map(|o| {
            let mut r = vec![o.variable.clone(), o.lead.to_string()];
            r.extend(unit_cols(ds, o.unit));
            r.push(ds.time_label(o.time));
            r.extend([num(o.actual), num(o.predicted), num(o.residual())]);
            r
        })
        .collect();
    write_table(dir, "outliers.csv", &LongTable { header: h, rows })?;
    if let Some(o) = rep.outliers.iter().max_by(|a, b| a.residual().abs().total_cmp(&b.residual().abs())) {
        summary.push_str(&format!(
            "largest first-stage residual: {} for '{}' at {} {} lead {}\n",
            num(o.residual()),
            o.variable,
            ds.unit_label(o.unit),
            ds.time_label(o.time),
            o.lead
        ));
    }

    let mut warnings = Vec::new();
    if !expected.is_empty() {
        let rows = rep
            .sign_flags
            .iter()
            .filter(|f| f.expected.is_some())
            .map(|f| {
                if f.violated {
                    warnings.push(format!(
                        "warning: '{}' is significant (t = {}) with the wrong sign, expected {:?}",
                        f.name,
                        num(f.t),
                        f.expected.expect("filtered")
                    ));
                }
                vec![
                    f.name.clone(),
                    num(f.beta),
                    num(f.se),
                    num(f.t),
                    format!("{:?}", f.expected.expect("filtered")).to_lowercase(),
                    f.violated.to_string(),
                ]
            })
            .collect();
        write_table(
            dir,
            "sign_flags.csv",
            &LongTable {
                header: header(&["name", "coefficient", "std_error", "t_stat", "expected", "violated"]),
                rows,
            },
        )?;
    }
    summary.push_str(&format!("warnings: {}\n", warnings.len()));
    for w in &warnings {
        summary.push_str(w);
        summary.push('\n');
    }
    write_text(dir, "diagnostics.txt", &summary)?;
    Ok((summary, warnings.len()))
}

fn print_coefficients(fit: &DmlFit, threshold: f64) {
    let mut rows = vec![header(&["name", "coefficient", "std_error", "t_stat", ""])];
    rows.extend(coefficient_rows(fit, threshold));
    print!("{}", render(&rows));
    println!("n = {}, * |t| > {}", fit.n_effective, threshold);
}

pub fn fit(config: &Path, g: &Globals) -> Result<(), CliError> {
    let (cfg, base) = load_config(config, g)?;
    cfg.validate_for_fit(&base)?;
    let dir = out_dir(g, &cfg, &base)?;
    let ds = load_data(&cfg, &base)?;
    let fit = estimate(&cfg, &base, &ds)?;
    write_fit(&dir, &cfg, &base, &ds, &fit)?;
    let (summary, _) = write_diagnostics(&dir, &cfg, &ds, &fit)?;
    print_coefficients(&fit, cfg.significance);
    for line in summary.lines().filter(|l| l.starts_with("warning:")) {
        eprintln!("{line}");
    }
    Ok(())
}

pub fn diagnose_dir(fit_dir: &Path, g: &Globals) -> Result<(), CliError> {
    let snap = fit_dir.join("config.toml");
    if !snap.is_file() {
        return Err(CliError::Data(format!("{}: no run directory here", fit_dir.display())));
    }
    let (cfg, base) = load_config(&snap, g)?;
    cfg.validate_for_fit(&base)?;
    let ds = load_data(&cfg, &base)?;
    let fit = estimate(&cfg, &base, &ds)?;
    let dir = match &g.out {
        Some(o) => {
            std::fs::create_dir_all(o).map_err(|e| CliError::Data(format!("{}: {e}", o.display())))?;
            o.clone()
        }
        None => fit_dir.to_path_buf(),
    };
    let (summary, _) = write_diagnostics(&dir, &cfg, &ds, &fit)?;
    print!("{summary}");
    Ok(())
}

pub fn synth(config: &Path, g: &Globals) -> Result<(), CliError> {
    let (cfg, base) = load_config(config, g)?;
    let sc = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("missing field `synth`".into()))?;
    let (data, truth) = match (&g.out, cfg.data_path(&base)) {
        (Some(o), _) => (o.join("synth.csv"), o.join("truth.json")),
        (None, Some(d)) => {
            let t = d.with_extension("truth.json");
            (d, t)
        }
        (None, None) => {
            return Err(CliError::Config("missing field `data` (or pass --out)".into()));
        }
    };
    let (ds, tr) = synth::generate(sc).map_err(|e| CliError::Config(format!("synth: {e}")))?;
    if let Some(p) = data.parent() {
        std::fs::create_dir_all(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    ds.to_long_table()
        .write_csv_path(&data)
        .map_err(|e| CliError::Data(format!("{}: {e}", data.display())))?;
    let json = serde_json::to_string_pretty(&tr).expect("truth serializes");
    std::fs::write(&truth, json).map_err(|e| CliError::Data(format!("{}: {e}", truth.display())))?;
    println!("{} rows written to {}", ds.n_rows(), data.display());
    Ok(())
}

/// Reads a plan CSV: unit keys, the outcome date, then one column per
/// planned treatment. Empty cells leave a treatment unplanned.
fn read_plan(path: &Path, ds: &PanelDataset) -> Result<TreatmentPlan, CliError> {
    let data = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    let t = read_table(path).map_err(|e| data(e.to_string()))?;
    let schema = ds.schema();
    let pos = |c: &str| {
        t.header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| data(format!("missing column '{c}'")))
    };
    let keys = schema
        .panel_colnames()
        .iter()
        .map(|c| pos(c))
        .collect::<Result<Vec<_>, _>>()?;
    let tcol = pos(schema.time_colname())?;
    let treatments: Vec<(usize, String)> = t
        .header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != tcol && !keys.contains(i))
        .map(|(i, h)| (i, h.clone()))
        .collect();
    let declared = schema.treatments();
    if let Some((_, h)) = treatments.iter().find(|(_, h)| !declared.contains(&h.as_str())) {
        return Err(data(format!("'{h}' is not a treatment column")));
    }
    let mut plan: TreatmentPlan = HashMap::new();
    for (i, row) in t.rows.iter().enumerate() {
        let key: Vec<&str> = keys.iter().map(|&k| row[k].as_str()).collect();
        let unit = ds
            .find_unit(&key)
            .ok_or_else(|| data(format!("row {}: unknown unit '{}'", i + 1, key.join("|"))))?;
        let time = ds
            .parse_time_label(&row[tcol])
            .ok_or_else(|| data(format!("row {}: bad time '{}'", i + 1, row[tcol])))?;
        for (c, name) in &treatments {
            let cell = row[*c].trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| data(format!("row {}: bad value '{cell}'", i + 1)))?;
            plan.insert((name.clone(), unit, time), v);
        }
    }
    Ok(plan)
}

pub fn forecast(config: &Path, fit_dir: &Path, plan: &Path, g: &Globals) -> Result<(), CliError> {
    let (cfg, base) = load_config(config, g)?;
    cfg.validate_for_fit(&base)?;
    let model_path = fit_dir.join("model.json");
    let text = std::fs::read_to_string(&model_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let saved: SavedModel = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let ds = load_data(&cfg, &base)?;
    let plan = read_plan(plan, &ds)?;
    let features = cfg.feature_builders(&ds)?;
    let rows = saved
        .forecast(&ds, &features, &cfg.builders(), &plan)
        .map_err(|e| CliError::Estimation(e.to_string()))?;
    let schema = ds.schema();
    let mut h: Vec<String> = schema.panel_colnames().to_vec();
    h.push(schema.time_colname().to_string());
    h.extend(header(&["lead", "baseline", "adjusted"]));
    let out_rows = rows
        .iter()
        .map(|r| {
            let mut v = unit_cols(&ds, r.unit);
            v.push(ds.time_label(r.outcome_time));
            v.extend([r.lead.to_string(), num(r.baseline), num(r.adjusted)]);
            v
        })
        .collect();
    let dir = match &g.out {
        Some(o) => {
            std::fs::create_dir_all(o).map_err(|e| CliError::Data(format!("{}: {e}", o.display())))?;
            o.clone()
        }
        None => fit_dir.to_path_buf(),
    };
    write_table(&dir, "forecast.csv", &LongTable { header: h, rows: out_rows })?;
    println!("{} forecasts written to {}", rows.len(), dir.join("forecast.csv").display());
    Ok(())
}
