//! End-to-end optimization: one AdamW step per batch on the total objective,
//! μ and the reversal strength λ advanced at epoch boundaries.

mod eval;
mod metrics;
mod optim;

pub use eval::{
    check_compatible, encode_codes, evaluate, evaluate_with, linear_probe, probe_disentanglement,
    shared_centroid_distances, Codes, Execution, ProbeReport, PROBE_STEPS,
};
pub use metrics::{CrossFoldMetrics, MetricsReport};
pub use optim::{clip_global_norm, AdamW};

use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{GrlSchedule, TrainConfig, TrainSettings};
use crate::datasets::{Dataset, FoldSplit};
use crate::diffcore::{grl_lambda, Tape};
use crate::model::{Checkpoint, FdrlModel};
use crate::objectives::{build_objective, effective_mu, DynamicFactorState};
use crate::{Error, Result};

/// Column order of the CSV loss log.
pub const LOSS_LOG_COLUMNS: [&str; 11] = [
    "step", "epoch", "l_task", "l_g", "l_l", "l_p", "l_d", "l_f", "l_total", "mu", "lambda",
];

/// One row of the loss log: every term of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub l_task: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub l_p: f64,
    pub l_d: f64,
    pub l_f: f64,
    pub l_total: f64,
    pub mu: f64,
    pub lambda: f64,
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// μ used by every step of this epoch.
    pub mu: f64,
    pub lambda: f64,
    pub mean_total: f64,
    pub d_a_global: Option<f64>,
    pub d_a_local_mean: Option<f64>,
    /// Test WAR after the epoch, only tracked with best-epoch selection.
    pub test_war: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    /// Epoch whose parameters were kept when best-epoch selection is on.
    pub best_epoch: Option<usize>,
}

/// λ for an epoch: the sigmoid ramp over progress `epoch / epochs`, or constant.
pub fn lambda_for_epoch(settings: &TrainSettings, epoch: usize) -> f64 {
    match settings.grl_schedule {
        GrlSchedule::Constant => settings.grl_lambda,
        GrlSchedule::Dann => {
            let progress = epoch as f64 / settings.epochs.max(1) as f64;
            settings.grl_lambda * grl_lambda(progress)
        }
    }
}

/// Validates the configuration against the data before any step is taken.
pub fn check_run(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    cfg.validate()?;
    check_compatible(&cfg.model, dataset)?;
    if cfg.train.folds != dataset.manifest.folds {
        warn!(
            "config asks for {} folds, data defines {}; using the data's folds",
            cfg.train.folds, dataset.manifest.folds
        );
    }
    Ok(())
}

/// Trains on every fold but `fold` and evaluates on `fold`.
pub fn train_fold(cfg: &TrainConfig, dataset: &Dataset, fold: usize) -> Result<FoldRun> {
    train_fold_observed(cfg, dataset, fold, |_, _| {})
}

/// [`train_fold`] with a callback after every epoch (its record and the
/// current parameters).
pub fn train_fold_observed(
    cfg: &TrainConfig,
    dataset: &Dataset,
    fold: usize,
    mut observe: impl FnMut(&EpochRecord, &FdrlModel),
) -> Result<FoldRun> {
    check_run(cfg, dataset)?;
    let split = FoldSplit::new(&dataset.manifest, fold)?;
    let settings = &cfg.train;
    let toggles = cfg.loss.toggles;
    let track_mu = toggles.alignment_global && toggles.alignment_local;

    let mut model = FdrlModel::new(&cfg.model, settings.seed)?;
    let mut opt = AdamW::new(&cfg.optim);
    let mut factor = DynamicFactorState::new(cfg.model.classes);
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, usize, FdrlModel)> = None;
    let mut step: u64 = 0;

    for epoch in 0..settings.epochs {
        let lambda = lambda_for_epoch(settings, epoch);
        let mu = effective_mu(factor.mu(), &toggles);
        let mut total_sum = 0.0;
        let batches = split.train_batches(settings.batch_size, settings.seed, epoch);
        for idx in &batches {
            let batch = dataset.batch(idx);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let obj = build_objective(&model, &mut tape, &bound, &batch, &cfg.loss, mu, lambda).map_err(|e| match e {
                Error::NonFinite { term, value, .. } => Error::NonFinite {
                    term,
                    epoch,
                    step: step as usize,
                    value,
                },
                other => other,
            })?;
            let r = &obj.report;
            tape.backward(obj.total)?;
            let mut grads = bound.gradients(&tape);
            if cfg.optim.clip_grad {
                clip_global_norm(&mut grads, cfg.optim.clip_norm);
            }
            opt.step(model.store.tensors_mut(), &grads);
            if track_mu {
                factor.record(Some(r.l_g), Some(&r.l_l_per_class), &obj.class_mass);
            }
            total_sum += r.l_total;
            log.push(LogRow {
                step,
                epoch,
                l_task: r.l_task,
                l_g: r.l_g,
                l_l: r.l_l,
                l_p: r.l_p,
                l_d: r.l_d,
                l_f: r.l_f,
                l_total: r.l_total,
                mu,
                lambda,
            });
            step += 1;
        }
        if track_mu {
            factor.update_mu();
        }
        let test_war = if settings.select_best_epoch {
            let m = evaluate(&model, dataset, &split.test, settings.eval_batch)?;
            if best.as_ref().is_none_or(|(w, _, _)| m.war > *w) {
                best = Some((m.war, epoch, model.clone()));
            }
            Some(m.war)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            mu,
            lambda,
            mean_total: total_sum / batches.len().max(1) as f64,
            d_a_global: factor.d_a_global,
            d_a_local_mean: factor.d_a_local_mean,
            test_war,
        };
        info!(
            "fold {fold} epoch {epoch}: L_total {:.5} mu {:.4} lambda {:.4}",
            record.mean_total, mu, lambda
        );
        observe(&record, &model);
        epochs.push(record);
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, m)) = best {
        model = m;
    }
    let metrics = evaluate(&model, dataset, &split.test, settings.eval_batch)?;
    Ok(FoldRun {
        fold,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            model,
        },
        log,
        epochs,
        metrics,
        best_epoch,
    })
}

/// One independent training context per fold, run concurrently when the
/// `parallel` feature is on. Results are in fold order.
pub fn train_all_folds(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Vec<FoldRun>, CrossFoldMetrics)> {
    check_run(cfg, dataset)?;
    let folds: Vec<usize> = (1..=dataset.manifest.folds).collect();
    #[cfg(feature = "parallel")]
    let runs: Vec<FoldRun> = {
        use rayon::prelude::*;
        folds
            .par_iter()
            .map(|&f| train_fold(cfg, dataset, f))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<FoldRun> = folds
        .iter()
        .map(|&f| train_fold(cfg, dataset, f))
        .collect::<Result<_>>()?;
    let summary = CrossFoldMetrics::new(runs.iter().map(|r| (r.fold, r.metrics.clone())).collect());
    Ok((runs, summary))
}

pub fn write_loss_log(w: impl Write, rows: &[LogRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in rows {
        wr.serialize(row)?;
    }
    if rows.is_empty() {
        wr.write_record(LOSS_LOG_COLUMNS)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig};
    use crate::datasets::{generate_synthetic, SynthSpec};

    fn tiny(epochs: usize) -> (TrainConfig, Dataset) {
        let ds = generate_synthetic(
            &SynthSpec {
                d_in: 6,
                samples: 40,
                ..SynthSpec::default()
            },
            2,
        );
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            d_in: 6,
            d: 4,
            hidden: 5,
            classes: 4,
            heads: 2,
        };
        cfg.train.epochs = epochs;
        cfg.optim.lr = 1e-3;
        (cfg, ds)
    }

    #[test]
    fn lambda_schedules() {
        let mut s = TrainSettings {
            epochs: 10,
            ..TrainSettings::default()
        };
        assert_eq!(lambda_for_epoch(&s, 0), 0.0);
        assert!((lambda_for_epoch(&s, 5) - (2.0 / (1.0 + (-5.0f64).exp()) - 1.0)).abs() < 1e-15);
        s.grl_schedule = GrlSchedule::Constant;
        s.grl_lambda = 0.3;
        assert_eq!(lambda_for_epoch(&s, 7), 0.3);
    }

    #[test]
    fn log_columns_are_fixed() {
        let (cfg, ds) = tiny(1);
        let run = train_fold(&cfg, &ds, 1).unwrap();
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &run.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOSS_LOG_COLUMNS.join(","));
        assert_eq!(text.lines().count(), run.log.len() + 1);
    }

    #[test]
    fn mu_is_constant_within_epoch_and_bounded() {
        let (cfg, ds) = tiny(4);
        let run = train_fold(&cfg, &ds, 2).unwrap();
        for e in &run.epochs {
            assert!((0.0..=1.0).contains(&e.mu));
            assert!(run.log.iter().filter(|r| r.epoch == e.epoch).all(|r| r.mu == e.mu && r.lambda == e.lambda));
        }
        assert_eq!(run.epochs[0].mu, 0.5);
    }

    #[test]
    fn s1_zeroes_regularizer_columns() {
        let (cfg, ds) = tiny(1);
        let run = train_fold(&cfg.with_ablation(Ablation::S1), &ds, 1).unwrap();
        assert!(run.log.iter().all(|r| r.l_g == 0.0 && r.l_l == 0.0 && r.l_p == 0.0 && r.l_d == 0.0));
        assert!(run.log.iter().all(|r| r.l_f > 0.0));
    }

    #[test]
    fn non_finite_input_is_reported_by_term() {
        let (mut cfg, ds) = tiny(1);
        cfg.optim.lr = 1e300;
        cfg.optim.weight_decay = 0.0;
        cfg.train.epochs = 3;
        match train_fold(&cfg, &ds, 1) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn best_epoch_selection_records_war() {
        let (mut cfg, ds) = tiny(3);
        cfg.train.select_best_epoch = true;
        let run = train_fold(&cfg, &ds, 1).unwrap();
        let best = run.best_epoch.unwrap();
        let wars: Vec<f64> = run.epochs.iter().map(|e| e.test_war.unwrap()).collect();
        assert!(wars.iter().all(|&w| w <= wars[best]));
        assert_eq!(run.metrics.war, wars[best]);
    }
}
