mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;
use serde_json::Value;

fn chainfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainfed")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"chain": {"lambda": -0.1}}"#);
    let out = chainfed(&["run", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chain.lambda"));

    let missing = dir.path().join("nope.json");
    let out = chainfed(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let mut cfg = tiny_config(3);
    cfg.chain.lr = 1e200;
    let cfg = write_config(dir.path(), &cfg.to_json());
    let metrics = dir.path().join("m.jsonl");
    let out = chainfed(&["run", "--config", &cfg, "--out", metrics.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let unwritable = dir.path().join("no/such/dir/m.jsonl");
    let cfg = write_config(dir.path(), &tiny_config(1).to_json());
    let out = chainfed(&["run", "--config", &cfg, "--out", unwritable.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn run_honours_seed_and_round_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(5).to_json());
    let read = |seed: &str| {
        let path = dir.path().join(format!("m{seed}.jsonl"));
        let p = path.to_str().unwrap();
        let out = chainfed(&["run", "--config", &cfg, "--out", p, "--seed", seed, "--rounds", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(&path).unwrap()
    };
    let a = read("11");
    assert_eq!(a.lines().count(), 2);
    let rec: Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    for key in ["round", "window", "clients", "train_loss", "eval_accuracy", "comm_bytes", "peak_mem"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
    assert_ne!(a, read("12"));
}

#[test]
fn report_memory_llama_preset() {
    let out = chainfed(&["report-memory", "--q", "1,4,32"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["model"], "llama2-7b");
    let chain = v["chain"].as_array().unwrap();
    assert_eq!(chain.len(), 3);
    let r: Vec<f64> = chain.iter().map(|c| c["reduction"].as_f64().unwrap()).collect();
    assert!(r[0] > r[1] && r[1] > r[2]);
    assert!((r[2] - 1.0).abs() < 0.05, "{r:?}");
    assert!(v["full"]["peak_bytes"].as_u64().unwrap() > chain[0]["report"]["peak_bytes"].as_u64().unwrap());
    assert!(v["latency_note"].is_string());
}

#[test]
fn report_memory_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(1).to_json());
    let out = chainfed(&["report-memory", "--preset", "config", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["chain"].as_array().unwrap().len(), 3);
    assert_eq!(v["dims"]["layers"], 3);
}

#[test]
fn profile_reports_the_start_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(1).to_json());
    let path = dir.path().join("p.json");
    let out = chainfed(&["profile", "--config", &cfg, "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let scores = v["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 3);
    let t = v["T"].as_f64().unwrap();
    let l_start = v["L_start"].as_u64().unwrap() as usize;
    let first_below = scores.iter().position(|s| s.as_f64().unwrap() < t).map_or(3, |i| i + 1);
    assert_eq!(l_start, first_below);
    assert!(v["weight"].as_f64().unwrap() > 0.0);
}

#[test]
fn baseline_modes_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(2).to_json());
    for mode in ["full_adapters", "linear_probing", "no_dlct", "no_gpo", "no_foat"] {
        let path = dir.path().join(format!("{mode}.jsonl"));
        let out = chainfed(&["baseline", "--mode", mode, "--config", &cfg, "--out", path.to_str().unwrap()]);
        assert!(out.status.success(), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2, "{mode}");
        assert!(path.with_extension("ckpt").exists());
    }
    let out = chainfed(&["baseline", "--mode", "bogus", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}
