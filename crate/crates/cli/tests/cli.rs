use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afa_core::checkpoint::{load_checkpoint, save_checkpoint, Model};
use afa_core::data::{DataConfig, RenderOracle};
use afa_core::denoiser::{build_denoiser, Condition, DenoiserParams, DenoiserSpec};
use afa_core::diffusion::{Denoiser, NoiseSchedule};
use afa_core::random::{randn, rng};
use serde_json::{json, Value};

fn spec() -> DenoiserSpec {
    DenoiserSpec {
        n_down: 1,
        n_up: 1,
        base_channels: 4,
        channel_mults: vec![1],
        cond_dim: 4,
        cond_tokens: 2,
        img_channels: 3,
        img_size: 8,
    }
}

fn base_config(dir: &Path) -> Value {
    json!({
        "seed": 1,
        "spec": spec(),
        "data": {
            "config": {"img_size": 8, "cond_dim": 4, "cond_tokens": 2, "jitter": 0.0},
            "n_train": 16,
            "n_val": 8
        },
        "train": {
            "expert": {"epochs": 1, "batch_size": 8},
            "aggregator": {"epochs": 1, "batch_size": 8},
            "router": {"epochs": 1, "batch_size": 8}
        },
        "sampling": {"cfg": {"steps": 5}, "n": 2},
        "analysis": {"draws": 2, "images": 2, "eval_draws": 1},
        "paths": {"data": dir.join("data")}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn afa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afa")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = base_config(dir);
    let c = write_config(dir, "run.json", &cfg);
    ok(afa(&["gen-data", "--config", s(&c), "--out", s(&dir.join("data"))]));
    assert!(dir.join("data/train_1/manifest.json").exists());
    ok(afa(&["pretrain-experts", "--config", s(&c), "--out", s(&dir.join("experts"))]));
    assert_eq!(fs::read_to_string(dir.join("experts/expert_0.jsonl")).unwrap().lines().count(), 2);

    let mut cfg = cfg;
    cfg["paths"]["experts"] = json!([dir.join("experts/expert_0"), dir.join("experts/expert_1")]);
    let c = write_config(dir, "run.json", &cfg);
    for cmd in ["train-afa", "train-moe", "merge", "analyze-wins"] {
        ok(afa(&[cmd, "--config", s(&c), "--out", s(dir)]));
    }
    assert!(matches!(load_checkpoint(&dir.join("afa")).unwrap(), Model::Ensemble(_)));
    assert!(matches!(load_checkpoint(&dir.join("moe")).unwrap(), Model::Moe(_)));
    assert!(matches!(load_checkpoint(&dir.join("merged")).unwrap(), Model::Denoiser(_)));
    assert!(dir.join("wins/wins_model1.png").exists());
    assert_eq!(fs::read_to_string(dir.join("wins/summary.jsonl")).unwrap().lines().count(), 2);

    cfg["paths"]["model"] = json!(dir.join("afa"));
    let c = write_config(dir, "run.json", &cfg);
    ok(afa(&["export-attn", "--config", s(&c), "--out", s(dir)]));
    // 2 images x 3 blocks x 2 models
    let pngs = fs::read_dir(dir.join("attention")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some()).count();
    assert_eq!(pngs, 12);
    let out = ok(afa(&["eval", "--config", s(&c), "--out", s(dir)]));
    let row: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(row["kind"], "afa");
    assert!(row["mse"].as_f64().unwrap().is_finite());
    ok(afa(&["sample", "--config", s(&c), "--out", s(&dir.join("samples"))]));
    assert!(dir.join("samples/sample_1.png").exists());
}

#[test]
fn sampling_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let model: DenoiserParams = build_denoiser(&spec(), 3).unwrap();
    save_checkpoint(&Model::Denoiser(model), &dir.join("model")).unwrap();
    let mut cfg = base_config(dir);
    cfg["paths"]["model"] = json!(dir.join("model"));
    let c = write_config(dir, "c.json", &cfg);
    let run = |seed: &str, out: &str| {
        ok(afa(&["sample", "--config", s(&c), "--seed", seed, "--out", s(&dir.join(out))]));
        fs::read(dir.join(out).join("sample_0.png")).unwrap()
    };
    let a = run("7", "a");
    assert_eq!(a, run("7", "b"));
    assert_ne!(a, run("8", "c"));
}

#[test]
fn single_expert_ensemble_reproduces_the_expert() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = base_config(dir);
    let c = write_config(dir, "c.json", &cfg);
    ok(afa(&["gen-data", "--config", s(&c), "--out", s(&dir.join("data"))]));
    let model: DenoiserParams = build_denoiser(&spec(), 5).unwrap();
    save_checkpoint(&Model::Denoiser(model.clone()), &dir.join("expert")).unwrap();
    cfg["paths"]["experts"] = json!([dir.join("expert")]);
    let c = write_config(dir, "c.json", &cfg);
    ok(afa(&["train-afa", "--config", s(&c), "--out", s(dir)]));
    let bundle = load_checkpoint(&dir.join("afa")).unwrap();
    let x = randn(&mut rng(1), &[2, 8, 8, 3]);
    let conds = vec![Condition::null(2, 4); 2];
    let t = [10, 900];
    let a = bundle.predict_noise(&x, &conds, &t).unwrap();
    assert!(a.bit_eq(&model.predict_noise(&x, &conds, &t).unwrap()));
}

#[test]
fn oracle_checkpoint_evaluates_to_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = base_config(dir);
    let c = write_config(dir, "c.json", &cfg);
    ok(afa(&["gen-data", "--config", s(&c), "--out", s(&dir.join("data"))]));
    let data = DataConfig {
        img_size: 8,
        cond_dim: 4,
        cond_tokens: 2,
        jitter: 0.0,
        ..Default::default()
    };
    let oracle = RenderOracle::new(data, NoiseSchedule::default()).unwrap();
    save_checkpoint(&Model::Oracle(oracle), &dir.join("oracle")).unwrap();
    cfg["paths"]["model"] = json!(dir.join("oracle"));
    let c = write_config(dir, "c.json", &cfg);
    let out = ok(afa(&["eval", "--config", s(&c), "--out", s(dir)]));
    let row: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(row["kind"], "oracle");
    assert!(row["mse"].as_f64().unwrap() < 1e-8, "{row}");
    assert_eq!(fs::read_to_string(dir.join("metrics.jsonl")).unwrap().trim(), row.to_string());
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = base_config(dir);
    cfg["surprise"] = json!(1);
    let bad = write_config(dir, "bad.json", &cfg);
    assert_eq!(afa(&["gen-data", "--config", s(&bad), "--out", s(dir)]).status.code(), Some(2));
    let mut cfg = base_config(dir);
    cfg.as_object_mut().unwrap().remove("spec");
    let missing = write_config(dir, "missing.json", &cfg);
    assert_eq!(afa(&["gen-data", "--config", s(&missing), "--out", s(dir)]).status.code(), Some(2));
    let mut cfg = base_config(dir);
    cfg["data"]["config"]["cond_dim"] = json!(5);
    let mismatch = write_config(dir, "mismatch.json", &cfg);
    assert_eq!(afa(&["gen-data", "--config", s(&mismatch), "--out", s(dir)]).status.code(), Some(2));
    assert_eq!(afa(&["frobnicate"]).status.code(), Some(2));
    let good = write_config(dir, "good.json", &base_config(dir));
    assert_eq!(afa(&["sample", "--config", s(&good), "--out", s(dir)]).status.code(), Some(2));
    // data directory never generated: a runtime failure
    let out = afa(&["pretrain-experts", "--config", s(&good), "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
