//! Trains the full model on the default synthetic set (fold 1) and prints
//! test metrics and frozen-representation probes before and after training.
//!
//! `cargo run --release --example quickstart -- [section.key=value ...]`

use std::time::Instant;

use fdrl_core::config::TrainConfig;
use fdrl_core::datasets::{generate_synthetic, FoldSplit, SynthSpec};
use fdrl_core::model::FdrlModel;
use fdrl_core::trainer::{probe_disentanglement, train_fold, ProbeReport};

fn show(label: &str, p: &ProbeReport) {
    println!(
        "{label:<9} modality|shared {:.4}  modality|private {:.4}  emotion|shared {:.4}  centroid gap {:.4}",
        p.modality_on_shared, p.modality_on_private, p.emotion_on_shared, p.mean_centroid_distance
    );
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::from_toml_with_overrides("", &overrides)?;
    if !overrides.iter().any(|o| o.starts_with("optim.lr")) {
        cfg.optim.lr = 1e-3;
    }
    if !overrides.iter().any(|o| o.starts_with("train.epochs")) {
        cfg.train.epochs = 50;
    }
    let data = generate_synthetic(&SynthSpec::default(), 7);
    let split = FoldSplit::new(&data.manifest, 1)?;
    let chunk = cfg.train.eval_batch;

    let untrained = FdrlModel::new(&cfg.model, cfg.train.seed)?;
    let before = probe_disentanglement(&untrained, &data, &split.train, &split.test, chunk)?;
    let start = Instant::now();
    let run = train_fold(&cfg, &data, 1)?;
    let elapsed = start.elapsed().as_secs_f64();
    let after = probe_disentanglement(&run.checkpoint.model, &data, &split.train, &split.test, chunk)?;

    println!("trained {} epochs in {elapsed:.1}s", cfg.train.epochs);
    println!("test WAR {:.4}  UAR {:.4}", run.metrics.war, run.metrics.uar);
    show("untrained", &before);
    show("trained", &after);
    Ok(())
}
