use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

/// The shipped example shrunk so every command finishes in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/two_state.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["experiment"] = json!({ "T": 24, "runs": 3, "seed": 5, "armse_from": 12 });
    cfg["train"]["samples"] = json!(300);
    cfg["train"]["epochs"] = json!(5);
    cfg["train"]["hidden"] = json!([16, 16]);
    cfg["certify"]["calibration_samples"] = json!(50);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn pdmhe(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmhe"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap()
}

/// Data rows of a CSV written by the tool (comment and header dropped).
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().nth(1).unwrap().to_string()
}

#[test]
fn simulate_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(pdmhe(&cfg, &a, &["simulate", "--runs", "1"]).status.success());
    assert!(pdmhe(&cfg, &b, &["simulate", "--runs", "1"]).status.success());
    let states = a.join("trajectories/run_0000_states.csv");
    let meas = a.join("trajectories/run_0000_measurements.csv");
    assert_eq!(rows(&states).len(), 25);
    assert_eq!(rows(&meas).len(), 24);
    assert_eq!(header(&meas), "t,y_0,xi_0,xi_1,zeta_0");
    assert_eq!(fs::read(&states).unwrap(), fs::read(b.join("trajectories/run_0000_states.csv")).unwrap());

    assert!(pdmhe(&cfg, &a, &["simulate"]).status.success());
    let firsts: Vec<_> = (0..3)
        .map(|k| rows(&a.join(format!("trajectories/run_{k:04}_measurements.csv")))[0].clone())
        .collect();
    assert_ne!(firsts[0], firsts[1]);
    assert_ne!(firsts[1], firsts[2]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"A": [[1.0]]}"#).unwrap();
    assert_eq!(pdmhe(&bad, &out, &["simulate"]).status.code(), Some(2));
    assert_eq!(pdmhe(&dir.path().join("missing.json"), &out, &["simulate"]).status.code(), Some(2));

    let cfg = small_config(dir.path());
    let ok = pdmhe(&cfg, &out, &["verify", "--estimator", "exact", "--delta-p", "1e-6", "--delta-d", "1e-6"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("verify_primal.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], json!(true));
    assert_eq!(report["required"], json!(574));
    assert!(report["config_hash"].is_string());

    let zero = pdmhe(&cfg, &out, &["verify", "--estimator", "zero", "--delta-p", "1e-6", "--delta-d", "1e-6"]);
    assert_eq!(zero.status.code(), Some(3));
    assert_eq!(header(&out.join("verify_primal.csv")), "sample_id,V_hat,V_star,excess,feasible,G_hat,G_star,shortfall");
    assert_eq!(rows(&out.join("verify_dual.csv")).len(), 574);

    // learned estimator without weights
    let empty = dir.path().join("empty");
    assert_eq!(pdmhe(&cfg, &empty, &["run"]).status.code(), Some(1));
}

#[test]
fn run_provenance_follows_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    assert!(pdmhe(&cfg, &out, &["run", "--estimator", "zero", "--delta", "0"]).status.success());
    let table = rows(&out.join("run.csv"));
    assert_eq!(table.len(), 25);
    assert!(table.iter().all(|r| r[5] == "backup"));

    assert!(pdmhe(&cfg, &out, &["run", "--estimator", "exact", "--delta", "inf"]).status.success());
    let table = rows(&out.join("run.csv"));
    for r in &table {
        let t: usize = r[0].parse().unwrap();
        // start-up steps are solved exactly without a check
        assert_eq!(r[5], if t >= 10 { "learned" } else { "backup" }, "t = {t}");
        assert_eq!(r[6].is_empty(), t < 10);
    }
}

#[test]
fn train_then_bench_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let trained = pdmhe(&cfg, &out, &["train"]);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    for f in ["primal.json", "dual.json", "calibration.json", "primal_curve.csv", "dual_curve.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(rows(&out.join("primal_curve.csv")).len(), 5);

    assert!(pdmhe(&cfg, &out, &["bench"]).status.success());
    let bench = rows(&out.join("bench.csv"));
    assert_eq!(header(&out.join("bench.csv")), "estimator,armse,median_step_us,backup_fraction");
    let names: Vec<&str> = bench.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["KF", "MHE", "PD-MHE"]);
    let again = dir.path().join("again");
    for f in ["primal.json", "dual.json", "calibration.json"] {
        fs::create_dir_all(&again).unwrap();
        fs::copy(out.join(f), again.join(f)).unwrap();
    }
    assert!(pdmhe(&cfg, &again, &["bench"]).status.success());
    let rerun = rows(&again.join("bench.csv"));
    for (x, y) in bench.iter().zip(&rerun) {
        assert_eq!(x[1], y[1], "ARMSE of {} differs", x[0]);
        assert_eq!(x[3], y[3]);
    }

    assert!(pdmhe(&cfg, &out, &["plot-data"]).status.success());
    assert_eq!(header(&out.join("plot.csv")), "t,estimator,mean,lo95,hi95");
    assert_eq!(rows(&out.join("plot.csv")).len(), 3 * 25);
}

#[test]
fn dataset_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    assert!(pdmhe(&cfg, &out, &["gen-dataset", "--kind", "dual", "--count", "20"]).status.success());
    let path = out.join("dataset_dual.csv");
    let table = rows(&path);
    assert_eq!(table.len(), 20);
    // seed, t, 10 residuals, 3 weight entries, 10 multipliers
    assert_eq!(table[0].len(), 2 + 10 + 3 + 10);
    assert!(header(&path).starts_with("seed,t,"));
}
