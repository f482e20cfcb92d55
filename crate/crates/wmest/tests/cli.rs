//! Black-box tests of the command-line interface and its exit codes:
//! 0 success, 1 input error, 2 numerical failure.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn wmest(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmest"))
        .args(args)
        .current_dir(dir)
        .env_remove("WMEST_SEED")
        .output()
        .expect("binary runs")
}

const SAMPLE: &str = "cluster_id,x1,x2\n\
    0,0.1,0.2\n0,-0.3,0.5\n0,0.4,-0.1\n\
    1,1.0,0.9\n1,1.2,1.1\n\
    2,-1.0,-0.8\n2,-0.9,-1.1\n2,-1.2,-0.7\n";

#[test]
fn estimate_writes_outputs_and_manifest() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("sample.csv"), SAMPLE).unwrap();
    let out = wmest(
        &["estimate", "sample.csv", "--family", "spatial-median", "--out-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let theta = std::fs::read_to_string(dir.path().join("run/theta.csv")).unwrap();
    assert_eq!(theta.trim().split(',').count(), 2);
    let cov = std::fs::read_to_string(dir.path().join("run/covariance.csv")).unwrap();
    for label in ["b_hat", "c_hat", "v_hat", "sigma_hat", "condition_v"] {
        assert!(cov.contains(label), "missing {label}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "estimate");
    assert!(manifest["outputs"].as_array().unwrap().len() == 2);
}

#[test]
fn estimate_with_weights_file() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("sample.csv"), SAMPLE).unwrap();
    std::fs::write(
        dir.path().join("weights.csv"),
        "cluster_id,weight\n0,2.0\n1,0.5\n2,0.8\n",
    )
    .unwrap();
    let out = wmest(
        &["estimate", "sample.csv", "--weights", "weights.csv", "--out-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_sample_is_an_input_error() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("sample.csv"), "cluster_id,x1\n0,abc\n").unwrap();
    let out = wmest(&["estimate", "sample.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn missing_weight_is_an_input_error() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("sample.csv"), SAMPLE).unwrap();
    std::fs::write(dir.path().join("weights.csv"), "cluster_id,weight\n0,2.0\n").unwrap();
    let out = wmest(
        &["estimate", "sample.csv", "--weights", "weights.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn degenerate_sample_is_a_numerical_failure() {
    // identical observations leave the spatial-median bread undefined
    let dir = tempdir().unwrap();
    std::fs::write(
        dir.path().join("sample.csv"),
        "cluster_id,x1,x2\n0,1,1\n1,1,1\n2,1,1\n",
    )
    .unwrap();
    let out = wmest(
        &["estimate", "sample.csv", "--family", "spatial-median"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_argument_is_an_input_error() {
    let dir = tempdir().unwrap();
    let out = wmest(&["estimate", "sample.csv", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn breakdown_reports_counts() {
    let dir = tempdir().unwrap();
    std::fs::write(
        dir.path().join("weights.csv"),
        "cluster_id,m_i,w_i\n0,2,2.0\n1,2,0.5\n2,4,0.75\n",
    )
    .unwrap();
    let out = wmest(&["breakdown", "weights.csv", "--eps-star", "0.5"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("k_star=2"), "{text}");

    let out = wmest(
        &["breakdown", "weights.csv", "--spatial-median-exact"],
        dir.path(),
    );
    assert!(out.status.success());

    let out = wmest(&["breakdown", "weights.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn optimize_weights_from_job_file() {
    let dir = tempdir().unwrap();
    std::fs::write(
        dir.path().join("job.json"),
        r#"{
            "configuration": {"name": "toy", "sizes": [2, 8]},
            "distribution": {"family": "gaussian", "rho": 0.5, "d": 2},
            "estimator": {"kind": "mean"},
            "seed": 3,
            "moment_replications": 40
        }"#,
    )
    .unwrap();
    let out = wmest(&["optimize-weights", "job.json", "--out-dir", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = std::fs::read_to_string(dir.path().join("run/weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 3);
    assert!(weights.starts_with("cluster_id,m_i,w_i"));
}

#[test]
fn seed_env_variable_overrides_job_seed() {
    let dir = tempdir().unwrap();
    std::fs::write(
        dir.path().join("job.json"),
        r#"{
            "configuration": {"name": "toy", "sizes": [2, 4]},
            "distribution": {"family": "gaussian", "rho": 0.3, "d": 2},
            "estimator": {"kind": "mean"},
            "seed": 3,
            "moment_replications": 5
        }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wmest"))
        .args(["optimize-weights", "job.json", "--out-dir", "run"])
        .current_dir(dir.path())
        .env("WMEST_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn reproduce_breakdown_succeeds_and_saves_table() {
    let dir = tempdir().unwrap();
    let out = wmest(
        &["reproduce", "--table", "breakdown", "--out-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success());
    let saved = std::fs::read_to_string(dir.path().join("run/breakdown.txt")).unwrap();
    assert!(saved.contains("16/16 rows within tolerance"));
}

#[test]
fn reproduce_unknown_table_is_an_input_error() {
    let dir = tempdir().unwrap();
    let out = wmest(&["reproduce", "--table", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown table"));
}
