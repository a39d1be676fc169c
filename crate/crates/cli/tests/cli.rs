//! End-to-end tests of the `mglu` binary: exit codes, report files, and
//! error reporting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mglu")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn verify_small_sweep_exits_zero_with_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("verify.json");
    let out = run(&[
        "verify",
        "--shapes",
        "8x16,64x256",
        "--masks",
        "1,2,16",
        "--seeds",
        "1",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["kind"], "verify");
    assert_eq!(report["failed"], 0);
    assert!(report["cases"].as_array().unwrap().len() > 10);
    assert!(report["cases"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["ok"] == true));
}

#[test]
fn verify_names_injected_corruption_and_exits_nonzero() {
    let out = run(&[
        "verify",
        "--shapes",
        "8x16",
        "--masks",
        "2",
        "--seeds",
        "1",
        "--inject-mask-corruption",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("failed: fused_vs_naive"),
        "failing case not named:\n{stdout}"
    );
}

#[test]
fn train_bundled_config_writes_schema_valid_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("train.json");
    let csv = dir.path().join("curve.csv");
    let out = run(&[
        "train",
        "--config",
        workspace_config("train_mglu.json").to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["kind"], "train");
    assert_eq!(report["report"]["diverged"], false);
    assert!(report["report"]["final_loss"].as_f64().unwrap().is_finite());
    assert!(report["report"]["wall_time_s"].as_f64().unwrap() > 0.0);

    let curve = std::fs::read_to_string(&csv).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,gate_ratio_1,gate_ratio_2");
    assert!(lines.count() >= 2);
}

#[test]
fn train_topk_config_runs_routed_path() {
    let out = run(&[
        "train",
        "--config",
        workspace_config("train_topk.json").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final loss"));
}

#[test]
fn train_compare_fixed_emits_summary() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cmp.json");
    let out = run(&[
        "train",
        "--config",
        workspace_config("train_mglu.json").to_str().unwrap(),
        "--compare-fixed",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("learned_better="));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report["comparison"]["learned_final_loss"].is_f64());
    assert!(report["comparison"]["fixed_final_loss"].is_f64());
}

#[test]
fn malformed_config_reports_field_path_and_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "steps": 10, "batch_size": 4, "lr": "fast"}"#).unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr"), "field path missing from: {err}");
}

#[test]
fn analyze_prints_forty_seven_percent_row() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("analyze.json");
    let out = run(&[
        "analyze",
        "--shapes",
        "2048x8192",
        "--masks",
        "1,16",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("46.875%"), "missing reduction row:\n{stdout}");
    assert!(stdout.contains("0.000%"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4); // lu, glu, mglu x {1, 16}
    assert_eq!(rows[2]["reduction_vs_glu"], 0.46875);
}

#[test]
fn bench_report_percentiles_are_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let out = run(&[
        "bench",
        "--shapes",
        "32x64",
        "--masks",
        "1,2",
        "--reps",
        "3",
        "--warmup",
        "1",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["kind"], "bench");
    assert!(report["environment"]["cores"].as_u64().unwrap() >= 1);
    assert!(report["environment"]["timestamp_unix"].as_u64().unwrap() > 0);
    for case in report["cases"].as_array().unwrap() {
        let p10 = case["p10_ms"].as_f64().unwrap();
        let median = case["median_ms"].as_f64().unwrap();
        let p90 = case["p90_ms"].as_f64().unwrap();
        assert!(p10 <= median && median <= p90);
        assert_eq!(case["reps"], 3);
    }
}
