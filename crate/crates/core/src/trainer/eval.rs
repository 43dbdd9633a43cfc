use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::AdamW;
use crate::config::{ModelConfig, OptimConfig};
use crate::datasets::{kfold_batches, Dataset};
use crate::diffcore::{Tape, Tensor};
use crate::model::FdrlModel;
use crate::{Error, Result};

/// How independent evaluation chunks are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Chunks on the rayon pool; same as `Sequential` without the `parallel` feature.
    #[default]
    Parallel,
}

fn map_chunks<T, F>(chunks: &[Vec<usize>], exec: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[usize]) -> Result<T> + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| f(c)).collect()
        }
        _ => chunks.iter().map(|c| f(c)).collect(),
    }
}

/// Checks that a model can consume a dataset.
pub fn check_compatible(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if model.d_in != dataset.d_in() {
        return Err(Error::Validation(format!(
            "model expects {}-dimensional features, data has {}",
            model.d_in,
            dataset.d_in()
        )));
    }
    if model.classes != dataset.classes() {
        return Err(Error::Validation(format!(
            "model has {} classes, data has {}",
            model.classes,
            dataset.classes()
        )));
    }
    Ok(())
}

/// Shared and private codes of a set of records, row-aligned with `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codes {
    pub s_a: Tensor,
    pub s_t: Tensor,
    pub p_a: Tensor,
    pub p_t: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

struct ChunkOut {
    codes: [Tensor; 4],
    predictions: Vec<usize>,
}

fn forward_chunk(model: &FdrlModel, dataset: &Dataset, idx: &[usize]) -> Result<ChunkOut> {
    let batch = dataset.batch(idx);
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let h_a = tape.constant(batch.h_a);
    let h_t = tape.constant(batch.h_t);
    let pack = model.encode(&mut tape, &bound, h_a, h_t)?;
    let fusion = model.fuse(&mut tape, &bound, &pack)?;
    Ok(ChunkOut {
        predictions: tape.value(fusion.logits).argmax_rows(),
        codes: [pack.s_a, pack.s_t, pack.p_a, pack.p_t].map(|v| tape.value(v).detached()),
    })
}

fn run(model: &FdrlModel, dataset: &Dataset, indices: &[usize], chunk: usize, exec: Execution) -> Result<Vec<ChunkOut>> {
    check_compatible(&model.config, dataset)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Validation(format!(
            "record index {bad} outside a dataset of {}",
            dataset.len()
        )));
    }
    let chunks = kfold_batches(indices, chunk, None);
    map_chunks(&chunks, exec, |c| forward_chunk(model, dataset, c))
}

/// Argmax of the task logits over `indices`, scored against the stored labels.
pub fn evaluate(model: &FdrlModel, dataset: &Dataset, indices: &[usize], chunk: usize) -> Result<MetricsReport> {
    evaluate_with(model, dataset, indices, chunk, Execution::default())
}

pub fn evaluate_with(
    model: &FdrlModel,
    dataset: &Dataset,
    indices: &[usize],
    chunk: usize,
    exec: Execution,
) -> Result<MetricsReport> {
    let outs = run(model, dataset, indices, chunk, exec)?;
    let predictions: Vec<usize> = outs.into_iter().flat_map(|o| o.predictions).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.records[i].y_e).collect();
    Ok(MetricsReport::from_predictions(
        model.config.classes,
        &labels,
        &predictions,
    ))
}

pub fn encode_codes(model: &FdrlModel, dataset: &Dataset, indices: &[usize], chunk: usize) -> Result<Codes> {
    let outs = run(model, dataset, indices, chunk, Execution::default())?;
    let stack = |k: usize| -> Result<Tensor> {
        let parts: Vec<&Tensor> = outs.iter().map(|o| &o.codes[k]).collect();
        if parts.is_empty() {
            return Ok(Tensor::zeros(0, model.config.d));
        }
        Ok(Tensor::vstack(&parts)?)
    };
    Ok(Codes {
        s_a: stack(0)?,
        s_t: stack(1)?,
        p_a: stack(2)?,
        p_t: stack(3)?,
        labels: indices.iter().map(|&i| dataset.records[i].y_e).collect(),
        indices: indices.to_vec(),
    })
}

/// Frozen-representation probes and shared-centroid distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Test accuracy of a linear speech-vs-text probe on shared codes.
    pub modality_on_shared: f64,
    /// Same probe on private codes.
    pub modality_on_private: f64,
    /// Test accuracy of a linear emotion probe on `[S_a; S_t]`.
    pub emotion_on_shared: f64,
    /// Per class, distance between the speech and text shared-code centroids
    /// on the evaluation records (`None` for classes absent there).
    pub centroid_distance: Vec<Option<f64>>,
    pub mean_centroid_distance: f64,
}

pub const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.05;

fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = train.shape();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += train.get(r, c) / n as f64;
        }
    }
    for r in 0..n {
        for (c, s) in sd.iter_mut().enumerate() {
            *s += (train.get(r, c) - mean[c]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| v.sqrt().max(1e-12)).collect();
    let f = |t: &Tensor| Tensor::from_fn(t.rows(), d, |r, c| (t.get(r, c) - mean[c]) / sd[c]);
    (f(train), f(test))
}

/// Multinomial logistic regression fitted by full-batch AdamW from zero
/// weights; returns accuracy on the test rows.
pub fn linear_probe(
    x_train: &Tensor,
    y_train: &[usize],
    x_test: &Tensor,
    y_test: &[usize],
    classes: usize,
) -> Result<f64> {
    let (x_train, x_test) = standardize(x_train, x_test);
    let d = x_train.cols();
    let mut params = vec![Tensor::zeros(d, classes), Tensor::zeros(1, classes)];
    let mut opt = AdamW::new(&OptimConfig {
        lr: PROBE_LR,
        weight_decay: 0.0,
        ..OptimConfig::default()
    });
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let xw = tape.matmul(x, w)?;
        let logits = tape.add_row(xw, b)?;
        let loss = tape.cross_entropy(logits, y_train)?;
        tape.backward(loss)?;
        let grads = vec![tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec()];
        opt.step(&mut params, &grads);
    }
    let logits = x_test.matmul(&params[0])?;
    let pred = Tensor::from_fn(logits.rows(), classes, |r, c| logits.get(r, c) + params[1].get(0, c)).argmax_rows();
    let correct = pred.iter().zip(y_test).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / y_test.len().max(1) as f64)
}

fn modality_rows(a: &Tensor, t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let x = Tensor::vstack(&[a, t])?;
    let y = (0..a.rows()).map(|_| 0).chain((0..t.rows()).map(|_| 1)).collect();
    Ok((x, y))
}

/// Probes frozen codes: fitted on `train`, scored on `test`.
pub fn probe_disentanglement(
    model: &FdrlModel,
    dataset: &Dataset,
    train: &[usize],
    test: &[usize],
    chunk: usize,
) -> Result<ProbeReport> {
    let tr = encode_codes(model, dataset, train, chunk)?;
    let te = encode_codes(model, dataset, test, chunk)?;
    let (xs_tr, ym_tr) = modality_rows(&tr.s_a, &tr.s_t)?;
    let (xs_te, ym_te) = modality_rows(&te.s_a, &te.s_t)?;
    let (xp_tr, _) = modality_rows(&tr.p_a, &tr.p_t)?;
    let (xp_te, _) = modality_rows(&te.p_a, &te.p_t)?;
    let ye_tr: Vec<usize> = tr.labels.iter().chain(&tr.labels).copied().collect();
    let ye_te: Vec<usize> = te.labels.iter().chain(&te.labels).copied().collect();
    let classes = model.config.classes;

    let centroid_distance = shared_centroid_distances(&te, classes);
    let present: Vec<f64> = centroid_distance.iter().flatten().copied().collect();
    Ok(ProbeReport {
        modality_on_shared: linear_probe(&xs_tr, &ym_tr, &xs_te, &ym_te, 2)?,
        modality_on_private: linear_probe(&xp_tr, &ym_tr, &xp_te, &ym_te, 2)?,
        emotion_on_shared: linear_probe(&xs_tr, &ye_tr, &xs_te, &ye_te, classes)?,
        mean_centroid_distance: present.iter().sum::<f64>() / present.len().max(1) as f64,
        centroid_distance,
    })
}

/// Per class, `‖mean(S_a) − mean(S_t)‖` over the records of that class.
pub fn shared_centroid_distances(codes: &Codes, classes: usize) -> Vec<Option<f64>> {
    let d = codes.s_a.cols();
    (0..classes)
        .map(|c| {
            let rows: Vec<usize> = (0..codes.labels.len()).filter(|&r| codes.labels[r] == c).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            let dist = (0..d)
                .map(|k| {
                    let diff: f64 = rows.iter().map(|&r| codes.s_a.get(r, k) - codes.s_t.get(r, k)).sum();
                    (diff / n).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            Some(dist)
        })
        .collect()
}
