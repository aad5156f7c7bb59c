use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dst_core::corpus::few_shot_size;
use dst_core::model::{Checkpoint, TinyConfig};
use dst_core::schema::{DescriptionVariant, Domain};
use dst_core::trainer::{
    evaluate_run, load_data, planned_steps, run_few_shot, run_full_shot, run_protocol, run_zero_shot,
    run_zero_shot_with, training_stream, CheckpointRef, DataSource, ExperimentConfig, Protocol, RunOptions, RunStatus,
    SyntheticSpec,
};
use dst_core::Error;

fn small(output: &Path) -> ExperimentConfig {
    ExperimentConfig {
        protocol: Protocol::ZeroShot,
        target_domain: Some(Domain::Taxi),
        variant: DescriptionVariant::SlotType,
        epochs: Some(2),
        batch_size: Some(16),
        learning_rate: 1e-3,
        tiny: TinyConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..Default::default()
        },
        domains: Some(BTreeSet::from([Domain::Taxi, Domain::Train, Domain::Hotel])),
        data: DataSource::Synthetic(SyntheticSpec {
            dialogues: 30,
            max_turns: 2,
            seed: 5,
            dev_fraction: 0.2,
            test_fraction: 0.2,
        }),
        output_dir: output.to_path_buf(),
        ..Default::default()
    }
}

fn without_output_dir(run: &CheckpointRef) -> serde_json::Value {
    let mut v = serde_json::to_value(&run.manifest).unwrap();
    v["config"]["output_dir"] = serde_json::Value::Null;
    v
}

#[test]
fn zero_shot_stream_excludes_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let stream = training_stream(&small(dir.path())).unwrap();
    assert!(!stream.is_empty());
    assert!(stream.iter().all(|e| !e.slot_id.starts_with("taxi-")));
    let data = load_data(&small(dir.path())).unwrap();
    let taxi_ids: BTreeSet<&str> = data
        .dialogues
        .iter()
        .filter(|d| d.touches(Domain::Taxi))
        .map(|d| d.dialogue_id.as_str())
        .collect();
    assert!(!taxi_ids.is_empty());
    assert!(stream.iter().all(|e| !taxi_ids.contains(e.dialogue_id.as_str())));
}

#[test]
fn zero_shot_accounting_and_determinism() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run_zero_shot(&small(a_dir.path())).unwrap();
    let b = run_zero_shot(&small(b_dir.path())).unwrap();
    let m = &a.manifest;
    assert_eq!(m.steps, planned_steps(2, m.train_examples, 16));
    assert_eq!(m.epochs_completed, 2);
    assert_eq!(m.train_examples, training_stream(&small(a_dir.path())).unwrap().len());
    assert_eq!(without_output_dir(&a), without_output_dir(&b));
    assert_eq!(m.checkpoint_hash, b.manifest.checkpoint_hash);
    assert!(a
        .checkpoint_path()
        .file_name()
        .unwrap()
        .to_string_lossy()
        .contains(&m.checkpoint_hash[..16]));

    // A second call finds the finished run instead of retraining.
    let again = run_zero_shot(&small(a_dir.path())).unwrap();
    assert_eq!(again, a);
}

#[test]
fn interrupted_run_resumes_bit_exactly() {
    let whole_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let mut config = small(whole_dir.path());
    config.epochs = Some(3);
    let whole = run_zero_shot(&config).unwrap();

    config.output_dir = split_dir.path().to_path_buf();
    let paused = run_zero_shot_with(
        &config,
        &RunOptions {
            pause_after_epochs: Some(1),
        },
    )
    .unwrap();
    assert!(matches!(
        paused,
        RunStatus::Paused {
            epochs_completed: 1,
            ..
        }
    ));
    let resumed = run_zero_shot(&config).unwrap();
    assert_eq!(resumed.manifest.checkpoint_hash, whole.manifest.checkpoint_hash);
    assert_eq!(without_output_dir(&resumed), without_output_dir(&whole));
    assert!(!resumed.run_dir.join("resume.json").exists());
}

#[test]
fn manifest_alone_reproduces_the_checkpoint() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let run = run_zero_shot(&small(first.path())).unwrap();
    let text = std::fs::read_to_string(run.manifest_path()).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut config: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    config.output_dir = second.path().to_path_buf();
    let again = run_zero_shot(&config).unwrap();
    assert_eq!(again.manifest.checkpoint_hash, run.manifest.checkpoint_hash);
    assert_eq!(again.manifest.corpus_fingerprint, run.manifest.corpus_fingerprint);
    let a = Checkpoint::load(&run.checkpoint_path()).unwrap();
    let b = Checkpoint::load(&again.checkpoint_path()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn few_shot_samples_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.protocol = Protocol::FewShot;
    config.few_shot_ratio = Some(0.1);
    config.base_epochs = Some(1);
    config.epochs = Some(2);
    config.batch_size = Some(8);
    let run = run_protocol(&config).unwrap();
    let data = load_data(&config).unwrap();
    let pool = data
        .dialogues
        .iter()
        .filter(|d| d.partition == dst_core::corpus::Partition::Train && d.touches(Domain::Taxi))
        .count();
    let m = &run.manifest;
    assert_eq!(m.sampled_dialogue_ids.len(), few_shot_size(pool, 0.1));
    assert_eq!(m.sampled_dialogue_ids.len(), pool.div_ceil(10));
    assert_eq!(m.steps, planned_steps(2, m.train_examples, 8));
    assert_eq!(m.base_run.as_deref(), Some(config.base_config().run_id().as_str()));
    let stream = training_stream(&config).unwrap();
    assert_eq!(stream.len(), m.train_examples);
    let sampled: BTreeSet<&str> = m.sampled_dialogue_ids.iter().map(String::as_str).collect();
    assert!(stream.iter().all(|e| sampled.contains(e.dialogue_id.as_str())));

    let other = tempfile::tempdir().unwrap();
    config.output_dir = other.path().to_path_buf();
    let base = run_zero_shot(&config.base_config()).unwrap();
    let again = run_few_shot(&config, &base).unwrap();
    assert_eq!(again.manifest.sampled_dialogue_ids, m.sampled_dialogue_ids);
    assert_eq!(again.manifest.checkpoint_hash, m.checkpoint_hash);
}

#[test]
fn few_shot_rejects_a_mismatched_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_zero_shot(&small(dir.path())).unwrap();
    let mut config = small(dir.path());
    config.protocol = Protocol::FewShot;
    config.few_shot_ratio = Some(0.5);
    config.variant = DescriptionVariant::RawName;
    assert!(matches!(run_few_shot(&config, &base), Err(Error::Config(_))));
}

#[test]
fn full_shot_early_stopping_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.protocol = Protocol::FullShot;
    config.target_domain = None;
    config.epochs = Some(4);
    config.learning_rate = 3e-2;
    let run = run_full_shot(&config).unwrap();
    let m = &run.manifest;
    assert_eq!(m.epoch_dev_loss.len(), m.epochs_completed);
    let losses = &m.epoch_dev_loss;
    let best = (0..losses.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b }) + 1;
    assert_eq!(m.best_epoch, Some(best));
    if m.epochs_completed < 4 {
        assert_eq!(m.epochs_completed, best + config.patience);
    }
    let ckpt = Checkpoint::load(&run.checkpoint_path()).unwrap();
    assert_eq!(ckpt.rng.epoch, best);

    let other = tempfile::tempdir().unwrap();
    config.output_dir = other.path().to_path_buf();
    assert_eq!(run_full_shot(&config).unwrap().manifest.best_epoch, m.best_epoch);
}

#[test]
fn evaluation_writes_record_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_zero_shot(&small(dir.path())).unwrap();
    let record = evaluate_run(&run).unwrap();
    assert_eq!(record.evaluated_domains, BTreeSet::from([Domain::Taxi]));
    let jga = record.scores.joint_goal_accuracy;
    assert!((0.0..=1.0).contains(&jga));
    for acc in record.scores.slot_accuracy.values() {
        assert!(jga <= *acc);
    }
    let dump: PathBuf = run.run_dir.join(&record.predictions);
    let turns = dst_core::evaluator::read_predictions(&dump).unwrap();
    assert_eq!(turns.len(), record.scores.n_turns);
    assert_eq!(evaluate_run(&run).unwrap(), record);
}

#[test]
fn config_errors_surface_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.target_domain = None;
    assert!(matches!(run_zero_shot(&config), Err(Error::Config(_))));
    let mut config = small(dir.path());
    config.domains = Some(BTreeSet::from([Domain::Hotel, Domain::Train]));
    assert!(matches!(run_zero_shot(&config), Err(Error::Config(_))));
}
