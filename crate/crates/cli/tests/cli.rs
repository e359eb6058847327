use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfil_cli::io::{read_csv, read_samples, write_samples};
use dfil_cli::run::{AttackRow, AuditReport, Fig2Row};
use dfil_core::diff::SmoothMap;
use dfil_core::encoders::NoisyEncoder;
use dfil_core::splitsim::MetricRow;
use dfil_core::Tensor;
use tempfile::TempDir;

fn dfil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfil")).args(args).output().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn samples(dir: &TempDir) -> PathBuf {
    let rows: Vec<Tensor> = (0..20)
        .map(|i| Tensor::vector((0..3).map(|j| ((i * 3 + j) as f64 * 0.37).sin()).collect()).unwrap())
        .collect();
    let p = dir.path().join("samples.csv");
    write_samples(&p, &rows).unwrap();
    p
}

#[test]
fn fig2_csv_has_fixed_schema_and_reparses() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", r#"{"d": 6, "k": 24, "trials": 4, "one_over_dfil": [0.01, 1.0, 100.0]}"#);
    let out = dir.path().join("fig2.csv");
    let run = dfil(&["fig2", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(
        header(&out),
        "one_over_dfil,sigma,bound_ub,bound_ours,mse_attack_ub,stderr_ub,mse_attack_b,stderr_b"
    );
    let rows: Vec<Fig2Row> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].one_over_dfil, 100.0);
    assert!(rows.iter().all(|r| r.bound_ours <= r.bound_ub));
}

#[test]
fn attack_csv_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        r#"{"d": 4, "k": 8, "trials": 3, "one_over_dfil": [1.0], "attacks": ["prior-mean", "map-gaussian"]}"#,
    );
    let out = dir.path().join("attack.csv");
    assert!(dfil(&["attack", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert_eq!(header(&out), "attack_kind,one_over_dfil,mean_mse,stderr,n_trials");
    let rows: Vec<AttackRow> = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.n_trials == 3));
}

#[test]
fn splitsim_csv_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        r#"{"splitsim": {
            "task": {"dim": 4, "classes": 2, "n_train": 64, "n_test": 32, "separation": 3.0, "seed": 0},
            "train": {"target_dfil": 1.0, "noise_aware": false, "compression": null, "snr_lambda": 0.0,
                      "hidden_width": 6, "epochs": 1, "learning_rate": 0.01, "batch_size": 16, "seed": 0},
            "head": {"hidden_width": 6, "epochs": 1, "learning_rate": 0.01, "batch_size": 16, "seed": 0},
            "one_over_dfil": [1.0, 10.0],
            "finetune_one_over_dfil": [10.0],
            "pretrain_one_over_dfil": 10.0
        }}"#,
    );
    let out = dir.path().join("split.csv");
    let run = dfil(&["splitsim", "--config", s(&cfg), "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(header(&out), "epoch,split,one_over_dfil,accuracy,mean_snr_reg");
    let rows: Vec<MetricRow> = read_csv(&out).unwrap();
    for split in ["baseline", "no-opt", "opts", "finetune"] {
        assert!(rows.iter().any(|r| r.split == split), "missing {split}");
    }
}

#[test]
fn identity_audit_reports_calibration_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = samples(&dir);
    let cfg = write(&dir, "c.json", r#"{"encoder": {"kind": "identity"}, "encoder_sigma": 0.8, "regularity_samples": 500}"#);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let run = dfil(&["audit", "--config", s(&cfg), "--samples", s(&data), "--target", "4", "--out", s(out)]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let report: AuditReport = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(report.calibration.len(), 1);
    assert!((report.calibration[0].sigma - 0.5).abs() < 1e-12);

    let enc = NoisyEncoder::new(SmoothMap::identity(3).unwrap(), 0.8, 0).unwrap();
    let xs = read_samples(&data).unwrap();
    let mean = xs.iter().map(|x| enc.fisher_report(x).unwrap().dfil).sum::<f64>() / xs.len() as f64;
    assert!((report.dfil.mean - mean).abs() <= 1e-12 * mean);
}

#[test]
fn bound_and_score_fit_emit_json() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        r#"{"d": 2, "prior": {"kind": "gaussian", "tau": 0.5}, "one_over_dfil": [1.0],
            "rdp": {"epsilon": 1.0, "diameters": [1.0]},
            "score": {"steps": 50, "learning_rate": 0.002, "batch_size": 32, "seed": 0,
                      "smoothing_sigma": 0.25, "hidden_width": null},
            "score_samples": 100}"#,
    );
    let bound = dfil(&["bound", "--config", s(&cfg)]);
    assert!(bound.status.success());
    let v: serde_json::Value = serde_json::from_slice(&bound.stdout).unwrap();
    assert_eq!(v["rows"][0]["van_trees"]["kind"], "van-trees");
    let hand = 0.25 / (1f64.exp() - 1.0);
    assert!((v["rdp"]["value"]["finite"].as_f64().unwrap() - hand).abs() < 1e-15);
    let fit = dfil(&["score-fit", "--config", s(&cfg)]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    assert_eq!(v["estimate"]["provenance"], "score-matched");
    assert_eq!(v["estimate"]["certified"], false);
}

#[test]
fn failures_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let typo = write(&dir, "typo.json", "{\n  \"d\": 3,\n  \"trails\": 5\n}");
    let run = dfil(&["bound", "--config", s(&typo)]);
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("typo.json:3:"));

    let zero = write(&dir, "zero.json", r#"{"trials": 0}"#);
    assert!(!dfil(&["fig2", "--config", s(&zero)]).status.success());
    let grid = write(&dir, "grid.json", r#"{"one_over_dfil": [1.0, -2.0]}"#);
    assert!(!dfil(&["bound", "--config", s(&grid)]).status.success());
    let missing = write(&dir, "m.json", r#"{"prior": {"kind": "samples", "path": "/nonexistent/x.csv"}}"#);
    assert!(!dfil(&["attack", "--config", s(&missing)]).status.success());
    assert!(!dfil(&["bound", "--config", "/nonexistent/config.json"]).status.success());
    assert!(!dfil(&["audit"]).status.success());
    assert!(!dfil(&["frobnicate"]).status.success());

    let ragged = write(&dir, "ragged.csv", "1,2,3\n4,5\n");
    let run = dfil(&["audit", "--samples", s(&ragged), "--target", "1"]);
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("row 2"));
    let text = write(&dir, "text.csv", "1,2\nx,3\n");
    assert!(!dfil(&["audit", "--samples", s(&text)]).status.success());
}

#[test]
fn samples_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = samples(&dir);
    let back = read_samples(&p).unwrap();
    assert_eq!(back.len(), 20);
    let again = dir.path().join("again.csv");
    write_samples(&again, &back).unwrap();
    assert_eq!(read_samples(&again).unwrap(), back);
}
