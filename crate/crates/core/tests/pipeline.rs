use std::fs;

use fdrl_core::config::TrainConfig;
use fdrl_core::datasets::{generate_synthetic, load_features, write_dataset, write_features_csv, SynthSpec};
use fdrl_core::model::Checkpoint;
use fdrl_core::trainer::{evaluate, train_fold};
use fdrl_core::Error;

fn small_spec() -> SynthSpec {
    SynthSpec {
        d_in: 6,
        samples: 120,
        ..SynthSpec::default()
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.d_in = 6;
    cfg.model.d = 8;
    cfg.model.hidden = 8;
    cfg.optim.lr = 3e-3;
    cfg.train.epochs = 8;
    cfg
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_spec(), 4);
    let path = dir.path().join("d.fdrl");
    write_dataset(&path, &ds).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.truth, ds.truth);
}

#[test]
fn csv_input_keeps_folds() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_spec(), 5);
    let path = dir.path().join("d.csv");
    write_features_csv(fs::File::create(&path).unwrap(), &ds).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.manifest.fold_of, ds.manifest.fold_of);
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.records.iter().zip(&ds.records) {
        for (x, y) in a.h_a.iter().zip(&b.h_a) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small_spec(), 6);
    let run = train_fold(&small_config(), &ds, 3).unwrap();
    let path = dir.path().join("ck.fdrl");
    run.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, run.checkpoint);
    let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.manifest.fold_of[i] == 3).collect();
    let m = evaluate(&back.model, &ds, &test, 16).unwrap();
    assert_eq!(m, run.metrics);
}

#[test]
fn training_learns_the_small_set() {
    let ds = generate_synthetic(&small_spec(), 8);
    let run = train_fold(&small_config(), &ds, 1).unwrap();
    assert!(run.metrics.war > 0.8, "war {}", run.metrics.war);
    let first = run.log.first().unwrap().l_task;
    let last = run.log.last().unwrap().l_task;
    assert!(last < first);
}

#[test]
fn mismatched_config_fails_before_training() {
    let ds = generate_synthetic(&small_spec(), 9);
    let mut cfg = small_config();
    cfg.model.classes = 3;
    assert!(matches!(train_fold(&cfg, &ds, 1), Err(Error::Validation(_))));
}
