use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coe_core::datagen::load_dataset;
use coe_core::protocol::parse_response;
use tempfile::TempDir;

const SMALL: &str = "n_sft = 60\nn_rl = 30\nn_eval = 20\nsft_steps = 150\nrl_steps = 10\n";

fn coe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// A small dataset plus an SFT checkpoint in a fresh directory.
fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    ok(&coe(&["datagen", "--config", "small.conf", "--out", "ds"], dir.path()));
    ok(&coe(
        &["train-sft", "--config", "small.conf", "--dataset", "ds", "--out", "run"],
        dir.path(),
    ));
    dir
}

#[test]
fn every_subcommand_has_help() {
    let here = Path::new(".");
    for sub in [
        "datagen",
        "train-sft",
        "train-rl",
        "eval",
        "infer",
        "inspect-attention",
        "grad-check",
        "reward-score",
    ] {
        let text = ok(&coe(&[sub, "--help"], here));
        assert!(text.contains("Usage: coe"), "{sub}: {text}");
    }
    assert!(ok(&coe(&["--help"], here)).contains("reward-score"));
}

#[test]
fn usage_errors_exit_one() {
    let here = Path::new(".");
    assert_eq!(coe(&["datagen", "--frobnicate"], here).status.code(), Some(1));
    assert_eq!(coe(&["bogus"], here).status.code(), Some(1));
    assert_eq!(coe(&["infer", "--dataset", "x"], here).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = coe(&["eval", "--dataset", "missing", "--checkpoint", "none.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    fs::write(dir.path().join("bad.conf"), "no_such_key = 1\n").unwrap();
    let out = coe(&["datagen", "--config", "bad.conf", "--out", "ds"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn grad_check_passes() {
    let text = ok(&coe(&["grad-check", "--seed", "3"], Path::new(".")));
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("max rel err"));
}

#[test]
fn seed_reproduces_datasets_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.conf"), SMALL).unwrap();
    for (out, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        ok(&coe(&["datagen", "--config", "small.conf", "--seed", seed, "--out", out], p));
    }
    let read = |d: &str, f: &str| fs::read(p.join(d).join(f)).unwrap();
    for f in ["features.bin", "sft.jsonl", "eval.jsonl", "rl_ref.jsonl"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "features.bin"), read("c", "features.bin"));

    for out in ["r1", "r2"] {
        ok(&coe(
            &["train-sft", "--config", "small.conf", "--dataset", "a", "--out", out],
            p,
        ));
    }
    assert_eq!(read("r1", "sft.ckpt"), read("r2", "sft.ckpt"));
    assert_eq!(read("r1", "sft_log.csv"), read("r2", "sft_log.csv"));
}

#[test]
fn training_writes_artifacts_and_eval_streams_samples() {
    let dir = trained();
    let p = dir.path();
    for f in ["sft.ckpt", "sft_log.csv", "eval_sft.jsonl", "report_sft.json"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }
    ok(&coe(
        &[
            "train-rl", "--config", "small.conf", "--dataset", "ds", "--checkpoint", "run/sft.ckpt", "--out", "run",
        ],
        p,
    ));
    for f in ["rl.ckpt", "rl_log.csv", "eval_rl.jsonl", "report_rl.json"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }

    let out = coe(&["eval", "--dataset", "ds", "--checkpoint", "run/rl.ckpt"], p);
    let text = ok(&out);
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["sample_id", "f1", "iou", "answer", "reward"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["n_samples"], 20);
}

#[test]
fn infer_emits_a_parseable_response() {
    let dir = trained();
    let p = dir.path();
    let ds = load_dataset(&p.join("ds")).unwrap();
    for s in ds.eval.iter().take(5) {
        let id = s.sample_id.to_string();
        let text = ok(&coe(
            &["infer", "--dataset", "ds", "--checkpoint", "run/sft.ckpt", "--sample-id", &id],
            p,
        ));
        parse_response(text.trim()).unwrap_or_else(|e| panic!("{text}: {e}"));
    }
    let out = coe(
        &["infer", "--dataset", "ds", "--checkpoint", "run/sft.ckpt", "--sample-id", "999999"],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_attention_prints_one_row_per_frame() {
    let dir = trained();
    let p = dir.path();
    let ds = load_dataset(&p.join("ds")).unwrap();
    let s = &ds.eval[0];
    let id = s.sample_id.to_string();
    let text = ok(&coe(
        &["inspect-attention", "--dataset", "ds", "--checkpoint", "run/sft.ckpt", "--sample-id", &id],
        p,
    ));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame_index,time_seconds,importance"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), s.n_frames());
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        let imp: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&imp));
    }
}

#[test]
fn reward_score_gives_annotations_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.conf"), SMALL).unwrap();
    ok(&coe(&["datagen", "--config", "small.conf", "--out", "ds"], p));
    let ds = load_dataset(&p.join("ds")).unwrap();

    let mut lines = String::new();
    for s in &ds.rl {
        let line = serde_json::json!({"sample_id": s.sample_id, "response": s.target_text().unwrap()});
        lines.push_str(&format!("{line}\n"));
    }
    fs::write(p.join("oracle.jsonl"), lines).unwrap();
    let out = coe(
        &["reward-score", "--candidates", "oracle.jsonl", "--reference", "ds/rl_ref.jsonl"],
        p,
    );
    assert_eq!(ok(&out).lines().count(), ds.rl.len());
    let summary: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(summary["n"], ds.rl.len());
    assert_eq!(summary["mean_reward"], 1.0);

    let junk = serde_json::json!({"sample_id": ds.rl[0].sample_id, "response": "hello"});
    fs::write(p.join("junk.jsonl"), format!("{junk}\n")).unwrap();
    let out = coe(
        &["reward-score", "--candidates", "junk.jsonl", "--reference", "ds/rl_ref.jsonl"],
        p,
    );
    let text = ok(&out);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["reward"], 0.0);
}
