use std::path::{Path, PathBuf};
use std::sync::Arc;

use empathic::config::{ExperimentConfig, Stage};
use empathic::error::Error;
use empathic::harness::{run_experiment, RunLayout, RunManifest, Services};
use empathic::io;
use empathic::records::{GenerationRecord, ReasoningRecord};
use empathic_core::prompting::KNOWLEDGE_LABELS;
use empathic::transport::{CountingTransport, OfflineTransport, RetryPolicy};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn offline() -> (Services, Arc<CountingTransport>) {
    let counting = Arc::new(CountingTransport::new(Arc::new(OfflineTransport)));
    let services = Services {
        transport: counting.clone(),
        provider: None,
        retry: RetryPolicy::default(),
    };
    (services, counting)
}

#[test]
fn baseline_fixture_replays_without_knowledge_in_prompts() {
    let cfg = ExperimentConfig::load(&fixtures().join("experiments/baseline.toml")).unwrap();
    let (services, counting) = offline();
    let root = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, &services, Some(root.path())).unwrap();
    assert_eq!(counting.requests(), 0);
    let name = out.run_dir.file_name().unwrap().to_string_lossy().into_owned();
    let (id, digest) = name.rsplit_once('-').unwrap();
    assert_eq!(id, cfg.id);
    assert_eq!(digest.len(), 12);
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    let gens: Vec<GenerationRecord> = io::read_jsonl(&RunLayout::new(&out.run_dir).generations()).unwrap();
    assert_eq!(gens.len(), 20);
    let reasoned: Vec<ReasoningRecord> = io::read_jsonl(&RunLayout::new(&out.run_dir).reasoning()).unwrap();
    assert_eq!(reasoned.len(), 20);
    for r in &reasoned {
        for label in KNOWLEDGE_LABELS {
            assert!(!r.prompt.contains(label), "{}: prompt mentions {label:?}", r.sample_id);
        }
    }
    assert!(out.manifest.deterministic);
    assert!(out.manifest.stages.iter().all(|s| s.status == "ok"));
}

#[test]
fn changed_config_gets_a_new_run_dir() {
    let mut cfg = ExperimentConfig::load(&fixtures().join("experiments/causality.toml")).unwrap();
    let (services, _) = offline();
    let root = tempfile::tempdir().unwrap();
    cfg.stages = vec![Stage::Prepare];
    let a = run_experiment(&cfg, &services, Some(root.path())).unwrap();
    cfg.seed += 1;
    let b = run_experiment(&cfg, &services, Some(root.path())).unwrap();
    assert_ne!(a.run_dir, b.run_dir);
}

#[test]
fn replay_miss_fails_the_reason_stage_and_keeps_the_manifest() {
    let mut cfg = ExperimentConfig::load(&fixtures().join("experiments/causality.toml")).unwrap();
    cfg.k = 1;
    let (services, counting) = offline();
    let root = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &services, Some(root.path())).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "reason");
            assert!(source.to_string().contains("replay"), "{source}");
        }
        other => panic!("expected a stage error, got {other}"),
    }
    assert_eq!(counting.requests(), 0);
    let run_dir = std::fs::read_dir(root.path()).unwrap().next().unwrap().unwrap().path();
    let manifest: RunManifest = io::read_json(&RunLayout::new(&run_dir).manifest()).unwrap();
    let status = |s: Stage| manifest.stages.iter().find(|x| x.stage == s).unwrap().status.clone();
    assert_eq!(status(Stage::Select), "ok");
    assert_eq!(status(Stage::Reason), "failed");
    assert_eq!(status(Stage::Generate), "not_run");
}
