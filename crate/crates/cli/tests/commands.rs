//! End-to-end runs of the `orthotest` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn orthotest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthotest"))
        .args(args)
        .output()
        .unwrap()
}

fn json_out(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn predict_reports_zero_bias_and_j_noncentrality() {
    let cfg = config("g1_perp.json");
    let out = orthotest(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json_out(&out);
    let bias = doc["bias"][0]["values"][0].as_f64().unwrap();
    assert!(bias.abs() < 1e-12);
    let j = &doc["tests"][0];
    assert_eq!(j["name"], "j");
    assert_eq!(j["dof"], 1);
    assert!((j["ncp"].as_f64().unwrap() - 4.0).abs() < 1e-10);
    assert!((doc["decomposition"]["var_TperpM"].as_f64().unwrap() - 4.0).abs() < 1e-10);
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = orthotest(&["run", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn bad_overrides_and_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("out.json");
    for set in ["n=10", "bogus=1", "alpha=2", "score.t_perp_cap_m.0=x", "schema=2"] {
        let out = orthotest(&[
            "run",
            "--preset",
            "g1_perp",
            "--set",
            set,
            "--out",
            target.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(2), "--set {set}");
        assert!(!target.exists(), "--set {set} produced output");
    }
    assert_eq!(orthotest(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(orthotest(&["predict", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(
        &path,
        r#"{"schema": 1, "instance": "G1", "score": {}, "seed": 1, "rep": 100}"#,
    )
    .unwrap();
    let out = orthotest(&["predict", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prediction_round_trip_gives_identical_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.json");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let cfg = config("iv1_power.json");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        orthotest(&["predict", "--config", cfg, "--out", pred.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let common = ["run", "--config", cfg, "--reps", "300", "--seed", "9"];
    let out = orthotest(&[&common[..], &["--out", a.to_str().unwrap()]].concat());
    assert_eq!(out.status.code(), Some(0));
    let out = orthotest(
        &[
            &common[..],
            &["--prediction", pred.to_str().unwrap(), "--out", b.to_str().unwrap()],
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(0));
    let (a, b) = (read_json(&a), read_json(&b));
    assert_eq!(a["comparison"], b["comparison"]);
    assert_eq!(a["summary"]["master_seed"], 9);
    assert_eq!(a["summary"]["reps"], 300);
}

#[test]
fn failed_comparison_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.json");
    let cfg = config("g1_bias.json");
    let cfg = cfg.to_str().unwrap();
    let out = orthotest(&["predict", "--config", cfg]);
    let mut doc = json_out(&out);
    doc["bias"][0]["values"][0] = Value::from(-5.0);
    std::fs::write(&pred, doc.to_string()).unwrap();
    let out = orthotest(&[
        "run",
        "--config",
        cfg,
        "--reps",
        "200",
        "--prediction",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_out(&out)["comparison"]["all_pass"], false);
}

#[test]
fn raw_csv_has_one_row_per_replication() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("raw.csv");
    let out = orthotest(&[
        "run",
        "--preset",
        "g1_null",
        "--reps",
        "150",
        "--raw-csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("rep,seed,failed,gmm_0"));
    assert_eq!(lines.count(), 150);
}

#[test]
fn check_path_residuals_shrink_quadratically() {
    let out = orthotest(&["check-path", "--preset", "iv1_power"]);
    assert_eq!(out.status.code(), Some(0));
    let mut r = csv::Reader::from_reader(&out.stdout[..]);
    assert_eq!(r.headers().unwrap(), vec!["t", "residual", "residual_over_t2"]);
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.windows(2).all(|w| w[1][0] < w[0][0] && w[1][1] < w[0][1]));
    let ratios: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo > 0.0 && hi / lo < 4.0, "{ratios:?}");
}

#[test]
fn decompose_reports_iv_subspace_dimensions() {
    let out = orthotest(&["decompose", "--preset", "iv1_power"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json_out(&out);
    assert_eq!(doc["dims"]["T"], 5);
    assert_eq!(doc["dims"]["T_perp_cap_M"], 2);
    assert_eq!(doc["dims"]["M_perp"], 0);
    let d = &doc["decomposition"];
    assert!(d["var_T"].as_f64().unwrap().abs() < 1e-12);
    assert!((d["var_TperpM"].as_f64().unwrap() - 2.0).abs() < 1e-10);
}

#[test]
fn sampled_data_can_be_estimated() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sample.csv");
    let out = orthotest(&[
        "sample",
        "--preset",
        "iv1_tangent",
        "--set",
        "n=400",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = orthotest(&["estimate", "--preset", "iv1_tangent", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json_out(&out);
    assert_eq!(doc["n"], 400);
    assert_eq!(doc["ols"]["beta"].as_array().unwrap().len(), 2);
    assert_eq!(doc["dwh"]["dof"], 1);

    let g1 = dir.path().join("g1.csv");
    orthotest(&["sample", "--preset", "g1_null", "--out", g1.to_str().unwrap()]);
    let doc = json_out(&orthotest(&[
        "estimate",
        "--preset",
        "g1_null",
        "--data",
        g1.to_str().unwrap(),
    ]));
    assert_eq!(doc["n"], 1000);
    assert_eq!(doc["j"]["dof"], 1);
    assert!(doc["gmm"]["theta_hat"][0].as_f64().unwrap().abs() < 0.2);
}

#[test]
fn selftest_passes() {
    let out = orthotest(&["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("ok")), "{text}");
}
