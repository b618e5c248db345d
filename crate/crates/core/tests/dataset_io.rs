use std::fs;
use std::time::Instant;

use coe_core::datagen::{emit_dataset, load_dataset, read_features, DatagenConfig};

fn small() -> DatagenConfig {
    DatagenConfig {
        n_sft: 40,
        n_rl: 20,
        n_eval: 20,
        ..DatagenConfig::default()
    }
}

#[test]
fn emitted_dataset_reloads_field_for_field() {
    let dir = tempfile::tempdir().unwrap();
    let ds = emit_dataset(&small(), dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.sft, ds.sft);
    assert_eq!(back.rl, ds.rl);
    assert_eq!(back.eval, ds.eval);
}

#[test]
fn rl_prompts_withhold_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    emit_dataset(&small(), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("rl.jsonl")).unwrap();
    let mut n = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        for withheld in ["answer", "key_frame_indices", "reasoning_guidance", "world", "template"] {
            assert!(!obj.contains_key(withheld), "rl.jsonl leaks {withheld}");
        }
        assert!(obj.contains_key("question") && obj.contains_key("features"));
        n += 1;
    }
    assert_eq!(n, 20);
    let refs = fs::read_to_string(dir.path().join("rl_ref.jsonl")).unwrap();
    assert!(refs.lines().all(|l| l.contains("\"answer\"")));
}

#[test]
fn default_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let ds = emit_dataset(&DatagenConfig::default(), dir.path()).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    assert_eq!((ds.sft.len(), ds.rl.len()), (2000, 200));
    assert!(elapsed < 30.0, "{elapsed:.1}s");
}

#[test]
fn damaged_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    emit_dataset(&small(), dir.path()).unwrap();
    let feats = dir.path().join("features.bin");
    let bytes = fs::read(&feats).unwrap();
    assert_eq!(read_features(&feats).unwrap().len(), 80);

    fs::write(&feats, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_features(&feats).is_err());
    assert!(load_dataset(dir.path()).is_err());

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    fs::write(&feats, &bad).unwrap();
    assert!(read_features(&feats).is_err());
    fs::write(&feats, &bytes).unwrap();

    fs::remove_file(dir.path().join("rl_ref.jsonl")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("rl_ref.jsonl"), "{err}");
}

#[test]
fn missing_directory_names_the_path() {
    let err = load_dataset(std::path::Path::new("/nonexistent/coe-data")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/coe-data"), "{err}");
}

#[test]
fn reward_references_come_from_any_annotated_file() {
    use coe_core::datagen::read_reward_references;
    let dir = tempfile::tempdir().unwrap();
    let ds = emit_dataset(&small(), dir.path()).unwrap();
    let rl = read_reward_references(&dir.path().join("rl_ref.jsonl")).unwrap();
    let ev = read_reward_references(&dir.path().join("eval.jsonl")).unwrap();
    for s in &ds.rl {
        assert_eq!(rl[&s.sample_id], s.reward_reference());
    }
    for s in &ds.eval {
        assert_eq!(ev[&s.sample_id], s.reward_reference());
    }
    assert!(read_reward_references(&dir.path().join("rl.jsonl")).is_err());
}
