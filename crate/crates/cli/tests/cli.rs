use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn coreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coreg"))
        .args(args)
        .output()
        .expect("spawn coreg")
}

fn ok(args: &[&str]) -> String {
    let out = coreg(args);
    assert!(
        out.status.success(),
        "coreg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = coreg(args);
    assert!(!out.status.success(), "coreg {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(!stderr.trim().is_empty(), "no diagnostic for {args:?}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset in `<tmp>/data`.
fn dataset(tmp: &TempDir) -> (String, String) {
    let dir = tmp.path().join("data");
    ok(&[
        "gen-synthetic", "--leaves", "6", "--depth", "2", "--timesteps", "80", "--seed", "4",
        "--out-dir", s(&dir),
    ]);
    (
        s(&dir.join("values.csv")).to_string(),
        s(&dir.join("hierarchy.csv")).to_string(),
    )
}

fn train_args<'a>(values: &'a str, hierarchy: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--values", values, "--hierarchy", hierarchy, "--variant", "core", "--weight",
        "0.01", "--hidden", "6", "--max-epochs", "40", "--patience", "10", "--out-dir", out,
    ]
}

fn only_run_dir(out: &Path) -> std::path::PathBuf {
    let mut runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    runs.pop().unwrap()
}

fn report_without_timing(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("report.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (values, hierarchy) = dataset(&tmp);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&train_args(&values, &hierarchy, s(&a)));
    ok(&train_args(&values, &hierarchy, s(&b)));
    for out in [&a, &b] {
        assert!(out.join("summary.csv").is_file());
        assert!(out.join("curves.csv").is_file());
        assert!(only_run_dir(out).join("checkpoint").is_file());
    }
    assert_eq!(
        report_without_timing(&only_run_dir(&a)),
        report_without_timing(&only_run_dir(&b))
    );
    assert_eq!(
        fs::read(only_run_dir(&a).join("checkpoint")).unwrap(),
        fs::read(only_run_dir(&b).join("checkpoint")).unwrap()
    );
}

#[test]
fn evaluate_reproduces_the_test_metrics() {
    let tmp = TempDir::new().unwrap();
    let (values, hierarchy) = dataset(&tmp);
    let out = tmp.path().join("out");
    ok(&train_args(&values, &hierarchy, s(&out)));
    let run = only_run_dir(&out);
    let metrics = tmp.path().join("eval.json");
    ok(&[
        "evaluate", "--checkpoint", s(&run.join("checkpoint")), "--values", &values,
        "--hierarchy", &hierarchy, "--out", s(&metrics),
    ]);
    let evaluated: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let trained = report_without_timing(&run);
    assert_eq!(evaluated, trained["test"]);
}

#[test]
fn sweep_writes_one_run_per_weight() {
    let tmp = TempDir::new().unwrap();
    let (values, hierarchy) = dataset(&tmp);
    let out = tmp.path().join("out");
    ok(&[
        "sweep", "--values", &values, "--hierarchy", &hierarchy, "--variant", "core",
        "--weights", "0,0.01,0.1", "--hidden", "6", "--max-epochs", "30", "--out-dir", s(&out),
    ]);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 3);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert_eq!(sweep.matches(",true").count(), 1);
}

#[test]
fn make_noisy_drops_leaves() {
    let tmp = TempDir::new().unwrap();
    let (values, hierarchy) = dataset(&tmp);
    let out = tmp.path().join("noisy");
    ok(&[
        "make-noisy", "--values", &values, "--hierarchy", &hierarchy, "--drop", "0.34",
        "--seed", "1", "--out-dir", s(&out),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dropped"].as_array().unwrap().len(), 2);
    let header = |p: &Path| fs::read_to_string(p).unwrap().lines().next().unwrap().split(',').count();
    assert_eq!(header(&out.join("values.csv")), header(Path::new(&values)) - 2);
}

#[test]
fn verify_bound_prints_and_writes_table() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(&["verify-bound", "--d", "128", "--trials", "2000", "--out-dir", s(tmp.path())]);
    assert!(stdout.contains("8d"));
    let csv = fs::read_to_string(tmp.path().join("bound_table.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn bad_input_exits_nonzero_with_diagnostic() {
    let tmp = TempDir::new().unwrap();
    fails(&["train", "--no-such-flag"]);
    fails(&["train", "--values", "/nonexistent/v.csv", "--hierarchy", "/nonexistent/h.csv"]);

    let (values, hierarchy) = dataset(&tmp);
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"lr": -1.0}"#).unwrap();
    let err = fails(&[
        "train", "--values", &values, "--hierarchy", &hierarchy, "--config", s(&config),
        "--out-dir", s(&tmp.path().join("out")),
    ]);
    assert!(err.contains("error"), "{err}");
    fails(&["train", "--values", &values, "--hierarchy", &hierarchy, "--hidden", "0"]);
    fails(&["verify-bound", "--d", "8", "--trials", "10"]);

    let garbage = tmp.path().join("checkpoint");
    fs::write(&garbage, "{}").unwrap();
    fails(&["evaluate", "--checkpoint", s(&garbage), "--values", &values, "--hierarchy", &hierarchy]);
}
