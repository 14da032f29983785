//! End-to-end runs: artifacts, determinism, resumption and corruption handling.

mod common;

use lpld::pipeline::{run_pipeline, Phase, LABELS, MANIFEST, POOL};
use lpld::report::load_report;
use lpld::Error;

#[test]
fn run_writes_every_artifact_and_valid_reports() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&common::tiny_config(dir.path()), None).unwrap();
    assert_eq!(m.result.phases.iter().map(|e| e.phase).collect::<Vec<_>>(), Phase::ALL.to_vec());
    assert!(m.result.phases.iter().all(|e| e.status == "run"));
    for f in ["teacher.ckpt", "stats.bin", "condensed/manifest.json", LABELS, POOL, "validate_log.csv", "diversity.csv", "recover_losses.csv", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    for p in Phase::ALL {
        load_report(&dir.path().join(p.report_file())).unwrap();
    }
    load_report(&dir.path().join(MANIFEST)).unwrap();
    let prune = load_report(&dir.path().join("prune.json")).unwrap();
    assert_eq!(prune["result"]["storage"]["compression"], 2.0);
}

#[test]
fn reruns_and_thread_counts_give_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&common::tiny_config(a.path()), None).unwrap();
    let mut cfg = common::tiny_config(b.path());
    cfg.threads = 3;
    run_pipeline(&cfg, None).unwrap();
    let read = |d: &std::path::Path| std::fs::read_to_string(d.join(MANIFEST)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    run_pipeline(&common::tiny_config(a.path()), None).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn resuming_reuses_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let full = run_pipeline(&cfg, None).unwrap();
    let validate_before = std::fs::read(dir.path().join("validate.json")).unwrap();
    let resumed = run_pipeline(&cfg, Some(Phase::Validate)).unwrap();
    assert_eq!(resumed.result.phases.iter().filter(|e| e.status == "loaded").count(), 4);
    for (a, b) in full.result.phases.iter().zip(&resumed.result.phases) {
        assert_eq!(a.outputs, b.outputs);
    }
    assert_eq!(std::fs::read(dir.path().join("validate.json")).unwrap(), validate_before);
}

#[test]
fn missing_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    run_pipeline(&cfg, None).unwrap();
    std::fs::remove_file(dir.path().join(LABELS)).unwrap();
    match run_pipeline(&cfg, Some(Phase::Prune)) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, dir.path().join(LABELS)),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    let msg = run_pipeline(&cfg, Some(Phase::Prune)).unwrap_err().to_string();
    assert!(msg.contains("labels.lpld"), "{msg}");
}

#[test]
fn tampered_artifact_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    run_pipeline(&cfg, None).unwrap();
    let p = dir.path().join(POOL);
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(run_pipeline(&cfg, Some(Phase::Validate)), Err(Error::Checksum { .. })));
}

#[test]
fn labels_from_another_condensed_set_are_rejected() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&common::tiny_config(a.path()), None).unwrap();
    let mut other = common::tiny_config(b.path());
    other.recover.iterations = 5;
    run_pipeline(&other, None).unwrap();
    std::fs::copy(a.path().join(LABELS), b.path().join(LABELS)).unwrap();
    std::fs::remove_file(b.path().join(MANIFEST)).unwrap();
    assert!(matches!(run_pipeline(&other, Some(Phase::Prune)), Err(Error::Checksum { .. })));
}
