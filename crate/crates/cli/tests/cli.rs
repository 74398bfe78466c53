use std::path::Path;
use std::process::{Command, Output};

use mcsa_dtr::simlab::{Dgp, OneStageDgp};
use mcsa_dtr::Panel;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcsa-dtr"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn simulate_schema_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--dgp", "one-stage", "--n", "1000", "--seed", "7", "--out", "p.csv"], dir.path());
    let text = read(dir.path().join("p.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,x1,x2,a1,y"));
    assert_eq!(lines.count(), 1000);
    assert!(!dir.path().join("p.latent.csv").exists());

    let loaded = Panel::read_csv(text.as_bytes(), OneStageDgp::layout()).unwrap();
    let generated = Dgp::OneStage(OneStageDgp::default()).generate(1000, 7).unwrap();
    assert_eq!(loaded, generated.panel);
}

#[test]
fn simulate_is_byte_identical_and_latent_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--dgp", "two-stage", "--n", "300", "--seed", "3", "--out", "a.csv", "--emit-latent"];
    ok(&args, dir.path());
    let first = read(dir.path().join("a.csv"));
    ok(&args, dir.path());
    assert_eq!(first, read(dir.path().join("a.csv")));
    let latent = read(dir.path().join("a.latent.csv"));
    assert!(latent.starts_with("id,u\n"));
    assert!(!first.lines().next().unwrap().contains('u'));
}

#[test]
fn zero_rows_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--dgp", "one-stage", "--n", "0", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn malformed_row_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--dgp", "one-stage", "--n", "50", "--out", "p.csv", "--spec-dir", "."], dir.path());
    let mut text = read(dir.path().join("p.csv"));
    text.push_str("51,0.1,oops,1,2.0\n");
    std::fs::write(dir.path().join("bad.csv"), text).unwrap();
    let out = run(&["fit", "--data", "bad.csv", "--model", "model.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 52") && err.contains("oops"), "{err}");
}

#[test]
fn unknown_spec_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("dgp.json"),
        "{\n  \"schema_version\": 1,\n  \"dgp\": {\"kind\": \"one-stage\", \"bta_u\": 1}\n}\n",
    )
    .unwrap();
    let out = run(&["simulate", "--dgp-file", "dgp.json", "--n", "10", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bta_u") && err.contains("line"), "{err}");
}

#[test]
fn sensa_with_zero_effect_prior_flags_the_check() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--dgp", "one-stage", "--n", "400", "--out", "p.csv", "--spec-dir", "."], dir.path());
    let sens = r#"{"schema_version": 1,
        "confounder": {"terms": ["x1", "x2", "a1"], "link": "identity"},
        "prior": {"zeta": [{"mean": 0, "variance": 0}, {"mean": 0.3, "variance": 0},
                           {"mean": -0.3, "variance": 0}, {"mean": 0.5, "variance": 0}],
                  "beta_u": {"mean": 0, "variance": 0}}}"#;
    std::fs::write(dir.path().join("zero.json"), sens).unwrap();
    let stdout = ok(
        &["sensa", "--data", "p.csv", "--model", "model.json", "--sensitivity", "zero.json", "--B", "60", "--out-dir", "o"],
        dir.path(),
    );
    assert!(stdout.contains("no-confounding check"), "{stdout}");
    let bundle: Value = serde_json::from_str(&read(dir.path().join("o/bundle.json"))).unwrap();
    let diff = bundle["results"]["no_confounding_check"]["max_abs_difference"].as_f64().unwrap();
    assert!(diff < 0.2, "{diff}");
    let summary = read(dir.path().join("o/summary.csv"));
    assert!(summary.starts_with("coefficient,term,unadjusted,adjusted,ci_low,ci_high\n"));
    assert_eq!(summary.lines().count(), 4);
}

fn numeric_outputs(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = read(&p);
            let body = if p.extension().is_some_and(|e| e == "json") {
                let v: Value = serde_json::from_str(&text).unwrap();
                v["results"].to_string()
            } else {
                text
            };
            (p.file_name().unwrap().to_string_lossy().into_owned(), body)
        })
        .collect()
}

#[test]
fn sensa_does_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--dgp", "two-stage", "--n", "300", "--out", "p.csv", "--spec-dir", "."], dir.path());
    let base = ["sensa", "--data", "p.csv", "--model", "model.json", "--sensitivity", "sensitivity.json", "--B", "50"];
    let mut outs = Vec::new();
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let mut args = base.to_vec();
        args.extend(["--threads", threads, "--out-dir", out]);
        ok(&args, dir.path());
        outs.push(numeric_outputs(&dir.path().join(out)));
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0].len(), 3);
}

#[test]
fn study_writes_tables_and_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        &[
            "study", "--dgp", "one-stage", "--reps", "2", "--n", "200", "--B", "40", "--n-eval", "200", "--zeta-n", "5000",
            "--scenarios", "unadjusted,narrow-centered", "--out-dir", "s",
        ],
        dir.path(),
    );
    assert!(stdout.contains("Narrow, Centered"));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["bundle.json", "estimates.csv", "metrics.csv", "table_coverage.csv", "table_estimates.csv", "table_proportion.csv"]
    );
    let est = read(dir.path().join("s/estimates.csv"));
    // 2 reps x 2 arms x 3 coefficients
    assert_eq!(est.lines().count(), 13);
    let bundle: Value = serde_json::from_str(&read(dir.path().join("s/bundle.json"))).unwrap();
    assert_eq!(bundle["metadata"]["config"]["reps"], 2);
    assert_eq!(bundle["metadata"]["seed"], 1);
}

#[test]
fn plasmode_generate_only() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["plasmode", "--synthetic", "200", "--reps", "2", "--generate-only", "--out-dir", "g"], dir.path());
    let g = dir.path().join("g");
    assert!(g.join("set_0001.csv").exists() && g.join("set_0002.csv").exists());
    // the generated spec files analyse a generated set
    ok(
        &["fit", "--data", "g/set_0001.csv", "--model", "g/model.json", "--weights", "iptw"],
        dir.path(),
    );
}

#[test]
fn plasmode_reports_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cov.csv"), "sex,a\n1,0\n0,1\n").unwrap();
    let out = run(&["plasmode", "--covariates", "cov.csv", "--reps", "1", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing columns"));
}
