use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = r#"{
  "synthetic": { "num_users": 12, "num_locations": 10 },
  "topics": { "topics": 3, "iterations": 30 },
  "model": { "dim": 8, "sequence": { "layers": 1 } },
  "train": { "epochs": 3, "warmup_epochs": 1, "batch_size": 128 }
}"#;

fn canoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canoe")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha256(p: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(p).unwrap()).to_vec()
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn generated(dir: &TempDir) -> std::path::PathBuf {
    let cfg = write_config(dir, "small.json", SMALL);
    let data = dir.path().join("data");
    let out = canoe(&["generate", "--config", path(&cfg), "--out", path(&data), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn generate_manifest_matches_file() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let out = canoe(&["generate", "--out", path(&data), "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = fs::read_to_string(data.join("checkins.jsonl")).unwrap().lines().count();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkins"].as_u64(), Some(lines as u64));
    assert_eq!(manifest["users"].as_u64(), Some(200));
    assert!(data.join("config.json").is_file());
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(canoe(&["generate", "--config", path(&cfg), "--out", path(out), "--seed", "7"]).status.success());
    }
    for f in ["checkins.jsonl", "manifest.json", "config.json"] {
        assert_eq!(sha256(&a.join(f)), sha256(&b.join(f)), "{f}");
    }
}

#[test]
fn invalid_field_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.json", r#"{"synthetic": {"p_explore": 1.5}}"#);
    let out = canoe(&["generate", "--config", path(&cfg), "--out", path(&dir.path().join("o")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p_explore"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.json", r#"{"train": {"epochz": 3}}"#);
    let out = canoe(&["generate", "--config", path(&cfg), "--out", path(&dir.path().join("o")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(canoe(&["generate", "--out", "/tmp/unused"]).status.code(), Some(2));
    assert_eq!(canoe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = canoe(&[
        "train",
        "--data",
        path(&dir.path().join("nope.jsonl")),
        "--model-out",
        path(&dir.path().join("m")),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let out = canoe(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let err: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(err < 1e-4);

    let dir = TempDir::new().unwrap();
    let strict = write_config(&dir, "strict.json", r#"{"tolerance": 1e-300}"#);
    let echo = dir.path().join("echo");
    let out = canoe(&["gradcheck", "--config", path(&strict), "--out", path(&echo)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(echo.join("config.json").is_file());
}

#[test]
fn eval_and_baseline_share_the_test_set() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir);
    let cfg = dir.path().join("small.json");
    let model = dir.path().join("model");
    let out = canoe(&["train", "--data", path(&data), "--config", path(&cfg), "--model-out", path(&model), "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss_total,loss_loc,loss_time,loss_aux,val_acc1,val_mrr"));
    assert_eq!(log.lines().count(), 4);

    let (ev, mm) = (dir.path().join("eval"), dir.path().join("mmc"));
    assert!(canoe(&["eval", "--data", path(&data), "--model", path(&model), "--report", path(&ev)]).status.success());
    assert!(canoe(&["mmc", "--data", path(&data), "--config", path(&cfg), "--report", path(&mm)]).status.success());
    let n = |d: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
        v["overall"]["n_samples"].as_u64().unwrap()
    };
    assert_eq!(n(&ev), n(&mm));
    for d in [&ev, &mm] {
        for f in ["report.txt", "report.csv", "config.json"] {
            assert!(d.join(f).is_file(), "{}", d.join(f).display());
        }
    }

    let ent = dir.path().join("entropy");
    let out = canoe(&["entropy", "--data", path(&data), "--config", path(&cfg), "--report", path(&ent), "--thresholds", "0.5,0.9"]);
    assert!(out.status.success());
    let rows = fs::read_to_string(ent.join("entropy.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows as u64, n(&ev));

    let bad = canoe(&["eval", "--data", path(&data), "--model", path(&model), "--report", path(&ev), "--thresholds", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn resume_continues_like_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir);
    let full_cfg = dir.path().join("small.json");
    let short_cfg = write_config(&dir, "short.json", &SMALL.replace("\"epochs\": 3", "\"epochs\": 2"));
    let (full, part, resumed) = (dir.path().join("full"), dir.path().join("part"), dir.path().join("resumed"));

    let train = |cfg: &Path, out: &Path, resume: Option<&Path>| {
        let mut args = vec!["train", "--data", path(&data), "--config", path(cfg), "--model-out", path(out), "--seed", "5"];
        if let Some(r) = resume {
            args.extend(["--resume", path(r)]);
        }
        let o = canoe(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train(&full_cfg, &full, None);
    train(&short_cfg, &part, None);
    train(&full_cfg, &resumed, Some(&part));

    let log = |d: &Path| fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert_eq!(log(&full), log(&resumed));
    assert_eq!(sha256(&full.join("model.json")), sha256(&resumed.join("model.json")));

    let other_arch = write_config(&dir, "arch.json", &SMALL.replace("\"dim\": 8", "\"dim\": 16"));
    let o = canoe(&[
        "train", "--data", path(&data), "--config", path(&other_arch), "--model-out", path(&dir.path().join("x")),
        "--seed", "5", "--resume", path(&part),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_output_feeds_training() {
    let dir = TempDir::new().unwrap();
    let data = generated(&dir);
    let cfg = dir.path().join("small.json");
    let prep = dir.path().join("prep");
    assert!(canoe(&["preprocess", "--data", path(&data), "--config", path(&cfg), "--out", path(&prep)]).status.success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (src, out) in [(&data, &a), (&prep, &b)] {
        let o = canoe(&["train", "--data", path(src), "--config", path(&cfg), "--model-out", path(out), "--seed", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());
}
