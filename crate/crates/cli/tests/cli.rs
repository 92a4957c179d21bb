use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"width": 16, "vision_width": 48, "n_visual": 16, "vocab_size": 28, "n_blocks": 1,
            "n_heads": 2, "ffn_mult": 1, "max_seq": 24, "ln_eps": 1e-5, "dropout": 0.0},
  "moda": {"variant": "cross_attention", "n_layers": 1, "n_heads": 2, "ffn_mult": 1,
           "aux_loss": {"kind": "none"}, "placement": "beginning", "gate_open_init": false,
           "share_across_blocks": false},
  "data": {"train": 16, "val": 4, "test": 4},
  "stage1": {"base_lr": 1e-3, "warmup_frac": 0.03, "total_steps": 2, "batch_size": 4, "weight_decay": 0.0},
  "stage2": {"base_lr": 1e-3, "warmup_frac": 0.03, "total_steps": 2, "batch_size": 4, "weight_decay": 0.0},
  "eval": {"every": 1, "val_samples": 4, "batch_size": 8}
}"#;

fn moda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moda")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn trained(dir: &Path, cfg: &Path) -> (PathBuf, PathBuf) {
    let out1 = dir.join("s1");
    let o = moda(&["train-stage1", "--config", s(cfg), "--out", s(&out1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck1 = out1.join("stage1.ckpt");
    assert!(ck1.exists());
    let out2 = dir.join("s2");
    let o = moda(&["train-stage2", "--config", s(cfg), "--out", s(&out2), "--ckpt", s(&ck1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (ck1, out2.join("stage2.ckpt"))
}

#[test]
fn two_stage_run_then_eval_generate_and_masks() {
    let (dir, cfg) = setup();
    let (_, ck2) = trained(dir.path(), &cfg);
    assert!(dir.path().join("s2/metrics_stage2.jsonl").exists());

    let o = moda(&["eval", "--config", s(&cfg), "--ckpt", s(&ck2)]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(report["paired_accuracy"].as_f64().unwrap() <= report["accuracy"].as_f64().unwrap());
    assert_eq!(report["questions"], 8);

    let o = moda(&["generate", "--config", s(&cfg), "--ckpt", s(&ck2), "--samples", "20,21"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);

    let csv = dir.path().join("m.csv");
    let o = moda(&["inspect-mask", "--config", s(&cfg), "--ckpt", s(&ck2), "--samples", "20", "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("sample_id,token_index,channel_index,mask_value"));
    assert_eq!(text.lines().count(), 1 + 16 * 16);
}

#[test]
fn mismatched_config_is_a_config_error() {
    let (dir, cfg) = setup();
    let (_, ck2) = trained(dir.path(), &cfg);
    let o = moda(&["eval", "--config", s(&cfg), "--ckpt", s(&ck2), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seeed": 3}"#).unwrap();
    let o = moda(&["train-stage1", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn masks_of_baseline_checkpoint_are_unsupported() {
    let (dir, _) = setup();
    let cfg = dir.path().join("base.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["moda"] = serde_json::Value::Null;
    std::fs::write(&cfg, v.to_string()).unwrap();
    let (_, ck2) = trained(dir.path(), &cfg);
    let o = moda(&["inspect-mask", "--config", s(&cfg), "--ckpt", s(&ck2), "--samples", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported"));
}

#[test]
fn grad_check_ops_passes() {
    let o = moda(&["grad-check", "--scope", "ops"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for op in ["matmul", "softmax", "layernorm", "cross_entropy"] {
        assert!(stdout(&o).contains(op));
    }
}

#[test]
fn synth_gen_writes_three_splits() {
    let (dir, cfg) = setup();
    let out = dir.path().join("data");
    let o = moda(&["synth-gen", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    for split in ["train", "val", "test"] {
        assert!(out.join(format!("dataset/{split}.mods")).exists());
    }
}

#[test]
fn ablate_writes_one_row_per_cell_and_seed() {
    let (dir, cfg) = setup();
    let matrix = dir.path().join("matrix.json");
    std::fs::write(
        &matrix,
        r#"{"seeds": [0, 1], "cells": [
            {"name": "baseline", "moda": null},
            {"name": "mlp_depth4", "moda": {"variant": "mlp_visual_only", "n_layers": 4, "n_heads": 2, "ffn_mult": 1,
              "aux_loss": {"kind": "none"}, "placement": "beginning", "gate_open_init": false, "share_across_blocks": false}}
        ]}"#,
    )
    .unwrap();
    let out = dir.path().join("abl");
    let o = moda(&["ablate", "--config", s(&cfg), "--matrix", s(&matrix), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.ends_with(',')), "no cell failed:\n{text}");
}
