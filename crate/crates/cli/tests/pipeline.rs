mod common;

use std::fs;

use common::*;
use d2tforge_pipeline::manifest::{PipelineManifest, LOCK_FILE};

#[test]
fn toy_pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    run_small_pipeline(&dir);
    let m = PipelineManifest::load(&dir).unwrap();
    assert_eq!(m.records.len(), TOY_STAGES.len());
    assert!(!dir.join(LOCK_FILE).exists());
    let report = fs::read_to_string(dir.join("eval/report.json")).unwrap();
    assert!(report.contains("SEEN_INTENT"));
    let serve = fs::read_to_string(dir.join("serve/predictions.jsonl")).unwrap();
    assert_eq!(serve.lines().count(), 40);
    let labeled = fs::read_to_string(dir.join("accuracy/labeled.tsv")).unwrap();
    assert!(labeled.contains("INCORRECT"));
    let ph = fs::read_to_string(dir.join("text/placeholder_report.json")).unwrap();
    assert!(ph.contains("\"round_trip_failures\": []"), "{ph}");
    let infer = m.records.iter().find(|r| r.stage == "d2t-infer").unwrap();
    assert!(infer.pins.checkpoint_digest.is_some());
    assert!(infer.pins.pack_hash.is_some() && infer.pins.vocab_digest.is_some());
}

#[test]
fn modified_artifact_is_a_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    seed_inputs(&dir);
    let c1 = config(&dir, "01_synthgen.toml", &small("01_synthgen.toml"));
    assert_eq!(run("synthgen", &c1, &dir, &[]), 0);
    let mut train = fs::read_to_string(dir.join("data/train.jsonl")).unwrap();
    train.push('\n');
    fs::write(dir.join("data/train.jsonl"), train).unwrap();
    let c2 = config(&dir, "02_render_train.toml", &[]);
    assert_eq!(run("render", &c2, &dir, &[]), 3);
    assert_eq!(PipelineManifest::load(&dir).unwrap().records.len(), 1);
}

#[test]
fn bad_config_and_missing_input_are_validation_errors() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    seed_inputs(&dir);
    let bad = config(&dir, "01_synthgen.toml", &[("no_such_key", int(1))]);
    assert_eq!(run("synthgen", &bad, &dir, &[]), 2);
    let escape = config(&dir, "01_synthgen.toml", &[("schema", toml::Value::String("../schema.txt".into()))]);
    assert_eq!(run("synthgen", &escape, &dir, &[]), 2);
    let render = config(&dir, "02_render_train.toml", &[]);
    assert_eq!(run("render", &render, &dir, &[]), 2);
    assert_eq!(run("no-such-stage", &render, &dir, &[]), 2);
}

#[test]
fn held_lock_is_a_runtime_error() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    seed_inputs(&dir);
    fs::write(dir.join(LOCK_FILE), "1\n").unwrap();
    let c1 = config(&dir, "01_synthgen.toml", &small("01_synthgen.toml"));
    assert_eq!(run("synthgen", &c1, &dir, &[]), 4);
}
