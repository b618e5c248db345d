use std::fs;

use coe_core::datagen::{emit_dataset, generate_dataset, DatagenConfig};
use coe_core::trainer::{load_model, run_pipeline, Session, TrainConfig};
use coe_core::CoeError;

fn data() -> DatagenConfig {
    DatagenConfig {
        n_sft: 60,
        n_rl: 30,
        n_eval: 30,
        ..DatagenConfig::default()
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        sft_steps: 120,
        rl_steps: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    emit_dataset(&data(), &ds).unwrap();
    let a = run_pipeline(&ds, &dir.path().join("a"), &quick()).unwrap();
    let b = run_pipeline(&ds, &dir.path().join("b"), &quick()).unwrap();
    assert_eq!(a, b);
    for f in ["sft.ckpt", "rl.ckpt", "sft_log.csv", "rl_log.csv", "reports.jsonl"] {
        let read = |d: &str| fs::read(dir.path().join(d).join(f)).unwrap();
        assert_eq!(read("a"), read("b"), "{f}");
    }
    assert_ne!(a.sft_fingerprint, a.rl_fingerprint);
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&dir.path().join("absent"), &dir.path().join("out"), &quick()).unwrap_err();
    assert!(matches!(err, CoeError::Io { .. }), "{err:?}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn saved_checkpoints_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let ds = emit_dataset(&data(), &ds_dir).unwrap();
    let out = run_pipeline(&ds_dir, &dir.path().join("run"), &quick()).unwrap();
    let (sft, _) = load_model(&dir.path().join("run/sft.ckpt"), &ds).unwrap();
    let (rl, _) = load_model(&dir.path().join("run/rl.ckpt"), &ds).unwrap();
    assert_eq!(sft.fingerprint(), out.sft_fingerprint);
    assert_eq!(rl.fingerprint(), out.rl_fingerprint);

    let mut other = data();
    other.set("d_content", "16").unwrap();
    let other = generate_dataset(&other).unwrap();
    assert!(load_model(&dir.path().join("run/sft.ckpt"), &other).is_err());
}

#[test]
fn sft_never_reads_the_preference_split() {
    let ds = generate_dataset(&data()).unwrap();
    let mut stripped = ds.clone();
    stripped.rl.clear();
    let train = |ds| {
        let session = Session::new(ds, quick()).unwrap();
        let mut model = session.init_model().unwrap();
        session.train_sft(&mut model, |_| {}).unwrap();
        model.fingerprint()
    };
    assert_eq!(train(&ds), train(&stripped));
}

#[test]
fn preference_phase_only_moves_the_decoder() {
    let ds = generate_dataset(&data()).unwrap();
    let session = Session::new(&ds, quick()).unwrap();
    let mut sft = session.init_model().unwrap();
    session.train_sft(&mut sft, |_| {}).unwrap();
    let rl = session.train_rl(&sft, session.cfg.weights, |_| {}).unwrap();
    assert_eq!(rl.egm, sft.egm);
    assert_ne!(rl.decoder, sft.decoder);
}

#[test]
fn untrained_grounding_is_no_better_than_chance() {
    let ds = generate_dataset(&data()).unwrap();
    let session = Session::new(&ds, TrainConfig::default()).unwrap();
    let (report, _) = session.evaluate(&session.init_model().unwrap()).unwrap();
    assert!(report.grounding_auroc <= 0.60, "{}", report.grounding_auroc);
}
