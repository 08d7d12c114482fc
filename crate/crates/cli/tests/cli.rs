use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCHEMA: &str = r#"
[schema]
time_colname = "week"
panel_colnames = ["store", "brand"]
cols = [
    { name = "store", data_type = "categorical" },
    { name = "brand", data_type = "categorical" },
    { name = "week", data_type = "date_time" },
    { name = "sales", data_type = "numeric", col_type = "outcome" },
    { name = "price", data_type = "numeric", col_type = "treatment" },
    { name = "income", data_type = "numeric" },
    { name = "segment", data_type = "categorical" },
    { name = "popularity", data_type = "numeric" },
]
"#;

const SYNTH: &str = r#"
[synth]
n_units = 24
n_periods = 12
seed = 3
"#;

fn dml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Config with the synth schema, an OLS baseline and a single own effect,
/// plus `extra` appended.
fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let body = format!(
        "data = \"data.csv\"\noutput_dir = \"run\"\n{SCHEMA}\n[baseline]\nkind = \"ols\"\n\n\
         [[treatments]]\nkind = \"own\"\ntreatment = \"price\"\n\n[options]\nk = 3\nseed = 2\n{extra}\n{SYNTH}"
    );
    write(dir, name, &body)
}

fn synth_data(dir: &Path) -> PathBuf {
    let c = config(dir, "synth.toml", "");
    let o = dml(&["synth", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    c
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn shipped_example_fits() {
    let tmp = tempfile::tempdir().unwrap();
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let data = tmp.path().join("data");
    let o = dml(&["synth", example.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("truth.json").is_file());

    // Point a copy of the example at the generated file.
    let text = read(&example).replace("data/synth.csv", &data.join("synth.csv").display().to_string());
    let c = write(tmp.path(), "example.toml", &text);
    let run = tmp.path().join("run");
    let o = dml(&["fit", c.to_str().unwrap(), "--out", run.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let coef = read(&run.join("coefficients.csv"));
    let lines: Vec<&str> = coef.lines().collect();
    assert_eq!(lines[0], "name,coefficient,std_error,t_stat,significant");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["price", "price*segment=g1", "peer:price"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("price") && stdout.contains('*'));
}

#[test]
fn missing_outcome_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "c.toml", "");
    let text = read(&c).replace(", col_type = \"outcome\"", "");
    write(tmp.path(), "c.toml", &text);
    let o = dml(&["fit", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1, "{e}");
    assert!(e.starts_with("error[config]:") && e.contains("outcome"), "{e}");
}

#[test]
fn config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, extra) in [
        ("unknown_key.toml", "bogus = 1\n"),
        ("bad_learner.toml", "[causal]\nkind = \"forest\"\n"),
        ("bad_lags.toml", "[featurizer]\nkind = \"dynamic\"\nmin_lag = 3\nmax_lag = 1\n"),
        ("bad_treatment.toml", "[[treatments]]\nkind = \"own\"\ntreatment = \"income\"\n"),
    ] {
        // `extra` lands after [options], so top-level keys go first.
        let c = if name == "unknown_key.toml" {
            let p = config(tmp.path(), name, "");
            write(tmp.path(), name, &format!("{extra}{}", read(&p)))
        } else {
            config(tmp.path(), name, extra)
        };
        let o = dml(&["fit", c.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", stderr(&o));
        assert_eq!(stderr(&o).lines().count(), 1);
    }
    let o = dml(&["fit", "/no/such/config.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_and_estimation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "c.toml", "");
    let o = dml(&["fit", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[data]:"));

    // A treatment that never varies leaves the second stage degenerate.
    synth_data(tmp.path());
    let data = tmp.path().join("data.csv");
    let t = read(&data);
    let mut lines = t.lines();
    let header = lines.next().unwrap();
    let pi = header.split(',').position(|h| h == "price").unwrap();
    let mut out = vec![header.to_string()];
    for l in lines {
        let mut f: Vec<&str> = l.split(',').collect();
        f[pi] = "1";
        out.push(f.join(","));
    }
    std::fs::write(&data, out.join("\n") + "\n").unwrap();
    let o = dml(&["fit", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[estimation]:"));
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let c = synth_data(tmp.path());
    let mut dirs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let d = tmp.path().join(format!("run{i}"));
        let o = dml(&["fit", c.to_str().unwrap(), "--out", d.to_str().unwrap(), "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(d);
    }
    let mut files: Vec<_> = std::fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(files.iter().any(|f| f == "config.toml"));
    for f in &files {
        let a = std::fs::read(dirs[0].join(f)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(a, std::fs::read(d.join(f)).unwrap(), "{f:?} differs");
        }
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let c = synth_data(tmp.path());
    let run = |seed: &str, name: &str| {
        let d = tmp.path().join(name);
        let o = dml(&["fit", c.to_str().unwrap(), "--out", d.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        read(&d.join("folds.csv"))
    };
    assert_eq!(run("2", "a"), run("2", "b"));
    assert_ne!(run("2", "a"), run("7", "c"));
}

#[test]
fn synth_command() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "c.toml", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = dml(&["synth", c.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(o.status.success());
    }
    let data = read(&a.join("synth.csv"));
    assert_eq!(data, read(&b.join("synth.csv")));
    assert_eq!(data.lines().count(), 1 + 24 * 12);
    let truth: serde_json::Value = serde_json::from_str(&read(&a.join("truth.json"))).unwrap();
    assert_eq!(truth["config"]["beta_own"], -2.0);

    let bad = write(tmp.path(), "bad.toml", "[synth]\nn_periods = 3\n");
    let o = dml(&["synth", bad.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let none = write(tmp.path(), "none.toml", "data = \"x.csv\"\n");
    assert_eq!(dml(&["synth", none.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn forecast_command() {
    let tmp = tempfile::tempdir().unwrap();
    synth_data(tmp.path());
    let c = config(tmp.path(), "lead1.toml", "min_lead = 1\nmax_lead = 1\n");
    let o = dml(&["fit", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");

    // Unplanned treatments carry zero surprise.
    let plan = write(tmp.path(), "plan.csv", "store,brand,week,price\n");
    let o = dml(&["forecast", c.to_str().unwrap(), "--fit", run.to_str().unwrap(), "--plan", plan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = read(&run.join("forecast.csv"));
    let rows: Vec<Vec<&str>> = f.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r[2] == "13" && r[3] == "1" && r[4] == r[5]));

    // A planned price moves that unit only.
    let plan = write(tmp.path(), "plan2.csv", "store,brand,week,price\ns0001,b0,13,9\n");
    let o = dml(&["forecast", c.to_str().unwrap(), "--fit", run.to_str().unwrap(), "--plan", plan.to_str().unwrap()]);
    assert!(o.status.success());
    let f = read(&run.join("forecast.csv"));
    let rows: Vec<Vec<&str>> = f.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_ne!(rows[0][4], rows[0][5]);
    assert!(rows[1..].iter().all(|r| r[4] == r[5]));

    let missing = tmp.path().join("nope");
    let o = dml(&["forecast", c.to_str().unwrap(), "--fit", missing.to_str().unwrap(), "--plan", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let far = write(tmp.path(), "far.csv", "store,brand,week,price\ns0001,b0,15,1\n");
    let o = dml(&["forecast", c.to_str().unwrap(), "--fit", run.to_str().unwrap(), "--plan", far.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("LeadOutOfRange"));
}

/// Outcome exactly linear in the treatment: the first stages are linear
/// in their targets, so the second stage fits without error.
fn exact_panel(dir: &Path) {
    let mut s = String::from("store,brand,week,sales,price,income,segment,popularity\n");
    for u in 0..6 {
        for w in 1..=10 {
            let x = ((u * 7 + w * 3) % 11) as f64 / 5.0;
            let p = 1.0 + ((u * 5 + w * w) % 13) as f64 / 7.0 + 0.3 * x;
            s += &format!("s{},b{},{w},{},{p},{x},g0,{}\n", u / 2, u % 2, -2.0 * p, 0.1 * w as f64);
        }
    }
    std::fs::write(dir.join("data.csv"), s).unwrap();
}

#[test]
fn diagnose_command() {
    let tmp = tempfile::tempdir().unwrap();
    exact_panel(tmp.path());
    let c = config(tmp.path(), "c.toml", "");
    let o = dml(&["fit", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    assert!(!run.join("sign_flags.csv").exists());
    let o = dml(&["diagnose", run.to_str().unwrap()]);
    assert!(o.status.success());
    let inf = read(&run.join("influence.csv"));
    let h: Vec<&str> = inf.lines().next().unwrap().split(',').collect();
    let d = h.iter().position(|c| *c == "cooks_d").unwrap();
    assert!(inf.lines().skip(1).all(|l| l.split(',').nth(d) == Some("0")));
    assert!(String::from_utf8_lossy(&o.stdout).contains("warnings: 0"));

    // A significant negative effect declared positive.
    let c = config(
        tmp.path(),
        "signs.toml",
        "[diagnostics]\nexpected_signs = { price = \"positive\" }\n",
    );
    let text = read(&c).replace("data.csv", "synth.csv");
    write(tmp.path(), "signs.toml", &text);
    let o = dml(&["synth", c.to_str().unwrap()]);
    assert!(o.status.success());
    let o = dml(&["fit", c.to_str().unwrap(), "--out", tmp.path().join("s").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: 'price'"));
    let o = dml(&["diagnose", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("warnings: 1") && out.contains("warning: 'price'"), "{out}");
    assert!(read(&tmp.path().join("s/sign_flags.csv")).contains("price,"));
}

#[test]
fn help_and_usage() {
    let o = dml(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("forecast"));
    let o = dml(&["fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().count(), 1);
}
