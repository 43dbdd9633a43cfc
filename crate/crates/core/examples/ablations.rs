//! Trains every ablation system on the heterogeneous synthetic preset and
//! prints test WAR/UAR per system, averaged over seeds.
//!
//! `cargo run --release --example ablations -- [seeds] [epochs] [key=value ...]`

use fdrl_core::config::{Ablation, TrainConfig};
use fdrl_core::datasets::{generate_synthetic, SynthSpec};
use fdrl_core::trainer::train_fold;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(50), |s| s.parse())?;
    let overrides: Vec<String> = args.collect();
    let spec = SynthSpec::heterogeneous();
    println!("system  war     uar     description");
    for ablation in Ablation::ALL {
        let (mut war, mut uar) = (0.0, 0.0);
        for seed in 0..seeds {
            let data = generate_synthetic(&spec, 50 + seed);
            let mut cfg = TrainConfig::from_toml_with_overrides("", &overrides)?.with_ablation(ablation);
            cfg.train.epochs = epochs;
            cfg.train.seed = seed;
            let run = train_fold(&cfg, &data, 1 + seed as usize % 5)?;
            war += run.metrics.war / seeds as f64;
            uar += run.metrics.uar / seeds as f64;
        }
        println!("{:<7} {war:.4}  {uar:.4}  {}", ablation.to_string(), ablation.describe());
    }
    Ok(())
}
