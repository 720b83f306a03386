use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaring"))
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("a line of output")).expect("json line")
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"model": {{"input_dim": 6, "width": 8, "layers": 2, "in_factors": [2, 4], "out_factors": [4, 2], "fine_layer_rank": 3}},
            "data": {{"classes": 4, "per_class": 6}},
            "train": {{"shots": 3, "epochs": 2, "batch_size": 4}}{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_matches_golden_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden("small.json");
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["samples.jsonl", "prototypes.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(golden(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn param_count_reports_audited_total() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["param-count", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["fine"], 240);
    assert_eq!(v["coarse"], 100);
    assert_eq!(v["combinator"], 130);
    assert_eq!(v["per_branch"], 470);
    assert_eq!(v["per_layer_baseline_per_branch"], 6144);
    assert!(dir.path().join("param_count.json").exists());
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"data": {"samples": "/nonexistent/s.jsonl", "prototypes": "/nonexistent/p.jsonl"}}"#,
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "dataset_not_found");
    assert!(v["message"].as_str().unwrap().contains("dataset not found"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"lamda": 0.5}}"#).unwrap();
    let out = run(&[
        "param-count",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "config");
}

#[test]
fn grad_check_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["grad-check", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["all_pass"], true);
    assert!(v["reports"].as_array().unwrap().len() >= 60);
}

#[test]
fn train_eval_and_analyses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg,
        "--out",
        run_dir.to_str().unwrap(),
        "--lambda",
        "1.0",
        "--epochs",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss_cls,loss_reg,loss_total,base_acc,novel_acc,hm,drift"
    );
    assert_eq!(lines.count(), 3);

    let ckpt = run_dir.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let eval_dir = dir.path().join("eval");
    let eval_dir = eval_dir.to_str().unwrap();
    for cmd in ["eval", "analyze-layers", "analyze-classes", "analyze-drift"] {
        let out = run(&[cmd, "--config", cfg, "--checkpoint", ckpt, "--out", eval_dir]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let eval: Value = serde_json::from_slice(&fs::read(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    let acc = eval["adapted"]["base_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let layers = fs::read_to_string(dir.path().join("eval/layers_visual.csv")).unwrap();
    assert_eq!(layers.lines().count(), 2);
    let drift: Value = serde_json::from_slice(&fs::read(dir.path().join("eval/drift.json")).unwrap()).unwrap();
    assert!(drift["mean"].as_f64().unwrap() <= 1.0);
}

#[test]
fn untrained_drift_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = run(&[
        "analyze-drift",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["mean"], 1.0);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let mut logs = Vec::new();
    for run_name in ["a", "b"] {
        let out_dir = dir.path().join(run_name);
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "4",
        ]);
        assert!(out.status.success());
        logs.push((
            fs::read(out_dir.join("metrics.csv")).unwrap(),
            fs::read(out_dir.join("checkpoint/weights.bin")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn sweeps_write_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#", "sweep": {"lambdas": [0.0, 1.0], "layer_ranks": [1, 2, 3], "seeds": [0]}"#,
    );
    let out_dir = dir.path().join("sweep");
    for (cmd, file, rows) in [
        ("sweep-lambda", "sweep_lambda.csv", 2),
        ("sweep-rank", "sweep_rank.csv", 3),
    ] {
        let out = bin()
            .args([
                cmd,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .env("ADARING_THREADS", "2")
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(out_dir.join(file)).unwrap();
        assert_eq!(csv.lines().count(), rows + 1);
        for line in csv.lines().skip(1) {
            assert!(line.split(',').all(|cell| !cell.is_empty()));
        }
    }
    assert!(out_dir.join("points/lambda_1_seed_0/metrics.csv").exists());
}
