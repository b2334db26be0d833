use std::path::Path;
use std::process::{Command, Output};

use lrformer::config::TrainConfig;
use lrformer::data::DatasetSpec;
use lrformer::model::{HeadKind, ModelConfig};

fn lrformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrformer")).args(args).output().expect("spawn lrformer")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path, lr: f64) -> String {
    let cfg = TrainConfig {
        model: ModelConfig { depth: 1, d_model: 8, heads: 2, d_ff: 8, n_tokens: 2, head_kind: HeadKind::Gp, ..ModelConfig::two_moons() },
        epochs: 2,
        warmup_epochs: 1,
        lr,
        dataset: DatasetSpec { n_train: 100, n_test: 50, ..DatasetSpec::default() },
        ..TrainConfig::two_moons()
    };
    let path = dir.join(format!("config_{lr:e}.json"));
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, 0.01);
    let run = d.join("run");
    let out = lrformer(&["train", "--config", &config, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = run.join("checkpoint.json");
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,train_acc\n"));
    assert_eq!(log.lines().count(), 3);

    let spec = d.join("data.json");
    std::fs::write(&spec, r#"{"kind": "two_moons", "n_test": 40}"#).unwrap();
    let report = d.join("eval.json");
    let out = lrformer(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", spec.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["n"], 40);

    let prefix = d.join("map");
    let out = lrformer(&["heatmap", "--checkpoint", ck.to_str().unwrap(), "--grid", "-3,4,-3,3.5,3", "--out", prefix.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("map.csv")).unwrap().lines().count(), 10);
    assert!(d.join("map.ppm").exists());

    let out = lrformer(&["audit", "--checkpoint", ck.to_str().unwrap(), "--data", spec.to_str().unwrap(), "--probes", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("layer"));
}

#[test]
fn gradcheck_passes() {
    let out = lrformer(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"depth": 1, "d_model": 8, "heads": 2, "d_ff": 8, "n_tokens": 2, "kernel": "scsa"}}"#).unwrap();
    assert_eq!(code(&lrformer(&["train", "--config", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&lrformer(&["train", "--config", "/nonexistent/config.json"])), 1);
    assert_eq!(code(&lrformer(&["heatmap", "--checkpoint", "x", "--grid", "1,0,0,1,3", "--out", "y"])), 1);
    assert_eq!(code(&lrformer(&["no-such-command"])), 1);
    let config = tiny_config(dir.path(), 0.01);
    assert_eq!(code(&lrformer(&["sweep-alpha", "--config", &config, "--alphas", "1,-5"])), 1);
}

#[test]
fn divergent_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1e300);
    let out = lrformer(&["train", "--config", &config, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
