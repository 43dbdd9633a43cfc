use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fdrl_core::config::{apply_override, Ablation, TrainConfig};
use fdrl_core::datasets::{generate_synthetic, load_features, write_dataset, Dataset, FoldSplit, SynthSpec};
use fdrl_core::diffcore::Fault;
use fdrl_core::model::Checkpoint;
use fdrl_core::trainer::{
    check_compatible, encode_codes, evaluate, probe_disentanglement, train_all_folds, train_fold, write_loss_log,
    CrossFoldMetrics, FoldRun,
};
use fdrl_core::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "fdrl", version, about = "Disentangled two-modality representation learning")]
struct Cli {
    /// Default parent directory for outputs when no explicit path is given.
    #[arg(long, global = true, env = "FDRL_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic two-modality dataset with known latent factors.
    Synth(SynthArgs),
    /// Train on one fold or on every fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Fit linear probes on frozen shared and private codes.
    Probe(ProbeArgs),
    /// Write S_a, S_t, P_a, P_t rows for every evaluated sample.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run every check (the default).
    #[arg(long, conflicts_with = "op")]
    all: bool,
    /// Run a single named check.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the registered check names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Feature file to write; the manifest and truth files go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from the heterogeneity-injected preset.
    #[arg(long)]
    heterogeneous: bool,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    shared_dim: Option<usize>,
    #[arg(long)]
    private_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    modality_shift: Option<f64>,
    #[arg(long)]
    private_scale: Option<f64>,
    #[arg(long)]
    map_seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature file (binary or CSV).
    #[arg(long)]
    data: PathBuf,
    /// TOML configuration; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Loss preset: none/s0 (full), s1..s6. Replaces the loss toggles.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, conflicts_with = "all_folds")]
    fold: Option<usize>,
    #[arg(long)]
    all_folds: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `<output-root>/<data stem>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate on this fold's test records instead of every record.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Probes train on the other folds and score on this one.
    #[arg(long, default_value_t = 1)]
    fold: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fold: Option<usize>,
    /// CSV file to write (default: `<output-root>/embeddings.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let root = cli.output_root;
    match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a, &root).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a, &root).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Probe(a) => probe(a).map(|_| ExitCode::SUCCESS),
        Command::ExportEmbeddings(a) => export(a, &root).map(|_| ExitCode::SUCCESS),
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.list {
        for name in gradsuite::check_names() {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("relu") => Some(Fault::ReluBackward),
        Some(other) => return Err(Error::Config(format!("unknown fault '{other}'"))),
    };
    let reports = gradsuite::run(a.op.as_deref(), a.seed, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} max_rel_err {:.3e}  entries {:>4}  {status}", r.name, r.max_rel_error, r.entries);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn synth(a: SynthArgs, root: &Path) -> Result<()> {
    let mut spec = if a.heterogeneous {
        SynthSpec::heterogeneous()
    } else {
        SynthSpec::default()
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { spec.$field = v; })* };
    }
    set!(classes, samples, d_in, shared_dim, separation, noise, modality_shift, private_scale, map_seed, folds);
    if let Some(p) = a.private_dim {
        spec.private_dim_a = p;
        spec.private_dim_t = p;
    }
    if [spec.classes, spec.samples, spec.d_in, spec.shared_dim, spec.private_dim_a, spec.folds].contains(&0) {
        return Err(Error::Config("synthetic dimensions, sample count and folds must be positive".into()));
    }
    if spec.samples < spec.folds {
        return Err(Error::Config(format!("{} samples cannot fill {} folds", spec.samples, spec.folds)));
    }
    let out = a.out.unwrap_or_else(|| root.join("synth.fdrl"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ds = generate_synthetic(&spec, a.seed);
    write_dataset(&out, &ds)?;
    println!(
        "wrote {} ({} samples, d_in {}, {} classes, {} folds)",
        out.display(),
        ds.len(),
        ds.d_in(),
        ds.classes(),
        ds.manifest.folds
    );
    Ok(())
}

fn has_key(table: &toml::Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(|s| s.as_table())
        .is_some_and(|s| s.contains_key(key))
}

/// File config, then `--set` overrides, then the data's dimensions for any
/// model size the user left unset, then the ablation preset and seed.
fn effective_config(a: &TrainArgs, ds: &Dataset) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for o in &a.overrides {
        apply_override(&mut table, o)?;
    }
    if !has_key(&table, "model", "d_in") {
        apply_override(&mut table, &format!("model.d_in={}", ds.d_in()))?;
    }
    if !has_key(&table, "model", "classes") {
        apply_override(&mut table, &format!("model.classes={}", ds.classes()))?;
    }
    if !has_key(&table, "train", "folds") {
        apply_override(&mut table, &format!("train.folds={}", ds.manifest.folds))?;
    }
    if let Some(seed) = a.seed {
        apply_override(&mut table, &format!("train.seed={seed}"))?;
    }
    let mut cfg = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)?;
    if let Some(ab) = a.ablation {
        cfg = cfg.with_ablation(ab);
    }
    check_compatible(&cfg.model, ds)?;
    Ok(cfg)
}

fn write_fold(dir: &Path, run: &FoldRun, class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.checkpoint.save(dir.join("checkpoint.fdrl"))?;
    let mut log = BufWriter::new(File::create(dir.join("loss_log.csv"))?);
    write_loss_log(&mut log, &run.log)?;
    log.flush()?;
    let mut report = run.metrics.to_report(class_names);
    if let Some(e) = run.best_epoch {
        report.push_str(&format!("best_epoch = {e}\n"));
    }
    fs::write(dir.join("metrics.txt"), report)?;
    Ok(())
}

fn train(a: TrainArgs, root: &Path) -> Result<()> {
    let ds = load_features(&a.data)?;
    let cfg = effective_config(&a, &ds)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.data.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        root.join(stem)
    });
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    info!("effective config written to {}", out.join("config.toml").display());

    let (runs, summary) = if a.all_folds {
        train_all_folds(&cfg, &ds)?
    } else {
        let run = train_fold(&cfg, &ds, a.fold.unwrap_or(1))?;
        let summary = CrossFoldMetrics::new(vec![(run.fold, run.metrics.clone())]);
        (vec![run], summary)
    };
    for run in &runs {
        write_fold(&out.join(format!("fold{}", run.fold)), run, &ds.manifest.class_names)?;
        println!("fold {}: WAR {:.4} UAR {:.4}", run.fold, run.metrics.war, run.metrics.uar);
    }
    if runs.len() > 1 {
        println!("mean: WAR {:.4} UAR {:.4}", summary.mean_war, summary.mean_uar);
    }
    fs::write(out.join("report.txt"), summary.to_report())?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(out.join("summary.json"), json + "\n")?;
    println!("outputs in {}", out.display());
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_features(data)?;
    check_compatible(&ck.config.model, &ds)?;
    Ok((ck, ds))
}

fn selected(ds: &Dataset, fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        Some(f) => Ok(FoldSplit::new(&ds.manifest, f)?.test),
        None => Ok((0..ds.len()).collect()),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    let idx = selected(&ds, a.fold)?;
    let m = evaluate(&ck.model, &ds, &idx, ck.config.train.eval_batch)?;
    print!("{}", m.to_report(&ds.manifest.class_names));
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    let split = FoldSplit::new(&ds.manifest, a.fold)?;
    let p = probe_disentanglement(&ck.model, &ds, &split.train, &split.test, ck.config.train.eval_batch)?;
    println!("modality_on_shared = {:.6}", p.modality_on_shared);
    println!("modality_on_private = {:.6}", p.modality_on_private);
    println!("emotion_on_shared = {:.6}", p.emotion_on_shared);
    println!("mean_centroid_distance = {:.6}", p.mean_centroid_distance);
    Ok(())
}

fn export(a: ExportArgs, root: &Path) -> Result<()> {
    let (ck, ds) = load_pair(&a.checkpoint, &a.data)?;
    let idx = selected(&ds, a.fold)?;
    let codes = encode_codes(&ck.model, &ds, &idx, ck.config.train.eval_batch)?;
    let out = a.out.unwrap_or_else(|| root.join("embeddings.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&out)?));
    let d = codes.s_a.cols();
    let mut header = vec!["sample".to_string(), "code".into(), "label".into(), "fold".into()];
    header.extend((0..d).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    let blocks = [("S_a", &codes.s_a), ("S_t", &codes.s_t), ("P_a", &codes.p_a), ("P_t", &codes.p_t)];
    for (row, &sample) in codes.indices.iter().enumerate() {
        for (name, t) in blocks {
            let mut rec = vec![
                sample.to_string(),
                name.to_string(),
                codes.labels[row].to_string(),
                ds.manifest.fold_of[sample].to_string(),
            ];
            rec.extend(t.row(row).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    println!("wrote {} rows of width {d} to {}", 4 * codes.indices.len(), out.display());
    Ok(())
}
