use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ellipse-robust"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn simulate_minimal_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": {"d": 3, "n": 100}, "contamination": {"epsilon": 0.0}}"#);
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--config", &cfg, "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["scatter"].as_array().unwrap().len(), 3);
    let file = manifest["datasets"][0]["file"].as_str().unwrap();
    assert!(out.join(file).exists());
}

#[test]
fn simulate_grid_is_cartesian() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"d": 3, "n": 50}, "contamination": {"epsilon": [0.0, 0.1, 0.2],
            "strategy": {"kind": "scale_inflation", "factor": 10}}, "seeds": [4, 5],
            "output": {"format": "csv"}}"#,
    );
    let out = dir.path().join("sim");
    assert!(run(&["simulate", "--config", &cfg, "--out", &s(&out)]).status.success());
    let csvs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 6);
}

#[test]
fn invalid_epsilon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": {"d": 3, "n": 100}, "contamination": {"epsilon": 0.5}}"#);
    let o = run(&["simulate", "--config", &cfg, "--out", &s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/contamination/epsilon"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["estimate", "--data", "/nonexistent/file.bin", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn estimate_clean_dataset_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": {"d": 3, "n": 3000}, "contamination": {"epsilon": 0.0}}"#);
    let sim = dir.path().join("sim");
    assert!(run(&["simulate", "--config", &cfg, "--out", &s(&sim)]).status.success());
    let out = dir.path().join("est");
    let o = run(&[
        "estimate",
        "--data",
        &s(&sim.join("eps0_seed0.bin")),
        "--truth",
        &s(&sim.join("manifest.json")),
        "--epsilon",
        "0.05",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["status"], "ok");
    let m = &r["metrics"][2];
    assert!(m["rel_frobenius"].as_f64().unwrap() < 0.5);
    assert_eq!(r["scatter"].as_array().unwrap().len(), 3);
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let lines: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 3);
    assert!(lines.iter().any(|l| l["stage"] == 3));
}

#[test]
fn estimate_aborts_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one.csv");
    fs::write(&data, "1.0,2.0,3.0\n").unwrap();
    let out = dir.path().join("est");
    let o = run(&["estimate", "--data", &s(&data), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let r: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["status"], "aborted");
    assert_eq!(r["reason"], "TooFewSamples");
}

#[test]
fn naive_estimator_reports_only_sign_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "1,0\n0,1\n-1,0\n0,-1\n2,0\n0,2\n").unwrap();
    let out = dir.path().join("est");
    let o = run(&["estimate", "--data", &s(&data), "--estimator", "naive-sign-cov", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["estimator"], "naive-sign-cov");
    assert!(r.get("cumulative").is_none());
    assert!(r["scatter"].is_array());
    assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap(), "");
}

const BENCH: &str = r#"{"model": {"d": 3, "n": 1200, "scatter": {"kind": "diagonal", "values": [3, 2, 1]}},
    "contamination": {"epsilon": [0.02, 0.05],
                      "strategy": {"kind": "spike_cluster", "direction": {"axis": 2}}},
    "seeds": [1, 2]}"#;

#[test]
fn bench_grid_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BENCH);
    let out = dir.path().join("bench");
    let o = run(&["bench", "--config", &cfg, "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,epsilon,d,n,strategy,estimator,rel_spectral,rel_frobenius,pca_projector_error,scale_error,wall_time_ms,filter_iterations"
    );
    assert_eq!(lines.count(), 12);

    let rep = dir.path().join("rep");
    let o = run(&["report", &s(&out.join("results.csv")), "--out", &s(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    for m in ["rel_spectral", "rel_frobenius", "pca_projector_error", "scale_error"] {
        assert!(rep.join(format!("{m}.svg")).exists());
    }
}

#[test]
fn bench_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BENCH);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["bench", "--config", &cfg, "--out", &s(&a), "--seed", "7"]).status.success());
    assert!(run(&["bench", "--config", &cfg, "--out", &s(&b), "--seed", "7"]).status.success());
    let ta = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 1 + 6);
}

#[test]
fn report_on_empty_body_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    fs::write(
        &p,
        "seed,epsilon,d,n,strategy,estimator,rel_spectral,rel_frobenius,pca_projector_error,scale_error,wall_time_ms,filter_iterations\n",
    )
    .unwrap();
    let o = run(&["report", &s(&p), "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no data rows"));
}
