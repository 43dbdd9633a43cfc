//! Loss terms, the dynamic global/local factor, and the composed objective.
//!
//! Cross-entropy terms are per-sample means (probability-weighted for the
//! local subdomain terms), so trade-off weights do not
//! depend on the batch size. The local alignment loss `L_l` is the mean of the
//! per-class terms; the orthogonality loss divides each Gram term by `B²`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, LossToggles};
use crate::datasets::Batch;
use crate::diffcore::{Tape, Tensor, Var};
use crate::model::{modality_labels, Bound, FdrlModel, FusionOutput, LatentPack};
use crate::Error;

/// Probability mass below which a class counts as unobserved for the epoch.
pub const EMPTY_CLASS_MASS: f64 = 1e-6;

/// Scalar values of every loss term of one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_task: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub l_l_per_class: Vec<f64>,
    pub l_p: f64,
    pub l_d: f64,
    pub l_f: f64,
    pub l_total: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl LossReport {
    /// Named scalar terms, in log-column order.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("l_task", self.l_task),
            ("l_g", self.l_g),
            ("l_l", self.l_l),
            ("l_p", self.l_p),
            ("l_d", self.l_d),
            ("l_f", self.l_f),
            ("l_total", self.l_total),
        ]
    }
}

/// Coefficients of each term in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub task: f64,
    pub global: f64,
    pub local: f64,
    pub modality: f64,
    pub orthogonal: f64,
    pub predictor: f64,
}

impl TermWeights {
    /// `L_task + α[(1-μ)L_g + μL_l] + β(L_p + L_d) + γL_f`, with disabled terms at 0.
    pub fn new(mu: f64, cfg: &LossConfig) -> Result<Self, Error> {
        for (name, v) in [("alpha", cfg.alpha), ("beta", cfg.beta), ("gamma", cfg.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "trade-off parameter {name} must be non-negative, got {v}"
                )));
            }
        }
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let t = cfg.toggles;
        Ok(TermWeights {
            task: 1.0,
            global: on(t.alignment_global) * cfg.alpha * (1.0 - mu),
            local: on(t.alignment_local) * cfg.alpha * mu,
            modality: on(t.disparity_adv) * cfg.beta,
            orthogonal: on(t.disparity_orth) * cfg.beta,
            predictor: on(t.predictor) * cfg.gamma,
        })
    }
}

/// Scalar composition of the total objective from already-computed terms.
pub fn loss_total(report: &LossReport, mu: f64, cfg: &LossConfig) -> Result<f64, Error> {
    let w = TermWeights::new(mu, cfg)?;
    // Disabled terms contribute exactly zero even if their slot holds a value.
    let part = |weight: f64, value: f64| if weight == 0.0 { 0.0 } else { weight * value };
    Ok(report.l_task
        + part(w.global, report.l_g)
        + part(w.local, report.l_l)
        + part(w.modality, report.l_p)
        + part(w.orthogonal, report.l_d)
        + part(w.predictor, report.l_f))
}

/// μ actually used for a step: the tracked value when both alignment branches
/// are active, otherwise pinned so the single active branch carries the full α.
pub fn effective_mu(tracked: f64, toggles: &LossToggles) -> f64 {
    match (toggles.alignment_global, toggles.alignment_local) {
        (true, false) => 0.0,
        (false, true) => 1.0,
        _ => tracked,
    }
}

/// Cross-entropy of the global domain discriminator on `[S_a; S_t]` against
/// modality labels, averaged over all `2B` rows.
pub fn loss_global_align(
    model: &FdrlModel,
    tape: &mut Tape,
    bound: &Bound,
    s_a: Var,
    s_t: Var,
    lambda: f64,
) -> Result<Var, Error> {
    let batch = tape.shape(s_a).0;
    let s = tape.concat_rows(&[s_a, s_t])?;
    let logits = model.global_domain_logits(tape, bound, s, lambda)?;
    Ok(tape.cross_entropy(logits, &modality_labels(batch))?)
}

/// Per-class subdomain losses on probability-weighted shared codes, plus their
/// mean over classes. Class `c`'s loss averages its rows' cross-entropy with
/// weights `p_c` (normalized by the class mass), so it measures modality
/// separability among samples of that class.
#[allow(clippy::too_many_arguments)]
pub fn loss_local_align(
    model: &FdrlModel,
    tape: &mut Tape,
    bound: &Bound,
    s_a: Var,
    s_t: Var,
    probs_a: &Tensor,
    probs_t: &Tensor,
    lambda: f64,
) -> Result<(Var, Vec<Var>), Error> {
    let classes = model.local_discs.len();
    if probs_a.cols() != classes || probs_t.cols() != classes {
        return Err(Error::Config(format!(
            "class probabilities have {}/{} columns, discriminator bank has {classes}",
            probs_a.cols(),
            probs_t.cols()
        )));
    }
    let batch = tape.shape(s_a).0;
    let s = tape.concat_rows(&[s_a, s_t])?;
    let probs = Tensor::vstack(&[probs_a, probs_t])?;
    let logits = model.local_domain_logits(tape, bound, s, &probs, lambda)?;
    let labels = modality_labels(batch);
    let per_class = logits
        .into_iter()
        .enumerate()
        .map(|(c, l)| {
            let mass: Vec<f64> = (0..2 * batch).map(|r| probs.get(r, c)).collect();
            tape.cross_entropy_weighted(l, &labels, &mass)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let weight = 1.0 / classes as f64;
    let terms: Vec<(Var, f64)> = per_class.iter().map(|&v| (v, weight)).collect();
    let mean = tape.combine(&terms)?;
    Ok((mean, per_class))
}

/// `L_p`: the modality discriminator's cross-entropy on `[P_a; P_t]`
/// (half the sum of the two per-modality means).
pub fn loss_modality(model: &FdrlModel, tape: &mut Tape, bound: &Bound, pack: &LatentPack) -> Result<Var, Error> {
    let p = tape.concat_rows(&[pack.p_a, pack.p_t])?;
    let logits = model.modality_disc_logits(tape, bound, p)?;
    Ok(tape.cross_entropy(logits, &pack.modality_labels())?)
}

/// `L_d = (‖S_aᵀP_a‖² + ‖S_tᵀP_t‖²) / B²`.
pub fn loss_orthogonal(tape: &mut Tape, pack: &LatentPack) -> Result<Var, Error> {
    let norm = 1.0 / (pack.batch as f64).powi(2);
    let mut terms = Vec::with_capacity(2);
    for (s, p) in [(pack.s_a, pack.p_a), (pack.s_t, pack.p_t)] {
        let st = tape.transpose(s);
        let gram = tape.matmul(st, p)?;
        terms.push((tape.frobenius_sq(gram), norm));
    }
    Ok(tape.combine(&terms)?)
}

/// `(L_p, L_d)`.
pub fn loss_disparity(model: &FdrlModel, tape: &mut Tape, bound: &Bound, pack: &LatentPack) -> Result<(Var, Var), Error> {
    Ok((loss_modality(model, tape, bound, pack)?, loss_orthogonal(tape, pack)?))
}

/// `L_f`: mean of the predictor's cross-entropies on `S_a + S_t`, `P_a`, `P_t`.
pub fn loss_predictor(
    model: &FdrlModel,
    tape: &mut Tape,
    bound: &Bound,
    pack: &LatentPack,
    labels: &[usize],
) -> Result<Var, Error> {
    let s = tape.elementwise_sum(pack.s_a, pack.s_t)?;
    let mut terms = Vec::with_capacity(3);
    for code in [s, pack.p_a, pack.p_t] {
        let logits = model.predict_fine(tape, bound, code)?;
        terms.push((tape.cross_entropy(logits, labels)?, 1.0 / 3.0));
    }
    Ok(tape.combine(&terms)?)
}

pub fn loss_task(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, Error> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Everything one training step needs from the forward pass.
#[derive(Debug)]
pub struct Objective {
    pub total: Var,
    pub report: LossReport,
    pub pack: LatentPack,
    pub fusion: FusionOutput,
    /// Predicted probability mass per class over the `2B` shared rows.
    pub class_mass: Vec<f64>,
}

/// Builds the full graph for one batch and composes the total objective.
/// Disabled terms are not built and report 0.
pub fn build_objective(
    model: &FdrlModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    cfg: &LossConfig,
    mu: f64,
    lambda: f64,
) -> Result<Objective, Error> {
    let weights = TermWeights::new(mu, cfg)?;
    let t = cfg.toggles;
    let h_a = tape.constant(batch.h_a.clone());
    let h_t = tape.constant(batch.h_t.clone());
    let pack = model.encode(tape, bound, h_a, h_t)?;
    let fusion = model.fuse(tape, bound, &pack)?;
    let task = loss_task(tape, fusion.logits, &batch.labels)?;

    let mut report = LossReport {
        mu,
        lambda,
        l_l_per_class: vec![0.0; model.config.classes],
        ..LossReport::default()
    };
    report.l_task = finite("l_task", tape.value(task).item())?;
    let mut terms = vec![(task, weights.task)];

    if t.alignment_global {
        let v = loss_global_align(model, tape, bound, pack.s_a, pack.s_t, lambda)?;
        report.l_g = finite("l_g", tape.value(v).item())?;
        terms.push((v, weights.global));
    }
    let probs_a = model.class_probabilities(tape.value(pack.s_a))?;
    let probs_t = model.class_probabilities(tape.value(pack.s_t))?;
    let class_mass: Vec<f64> = (0..model.config.classes)
        .map(|c| {
            (0..pack.batch)
                .map(|r| probs_a.get(r, c) + probs_t.get(r, c))
                .sum()
        })
        .collect();
    if t.alignment_local {
        let (mean, per_class) =
            loss_local_align(model, tape, bound, pack.s_a, pack.s_t, &probs_a, &probs_t, lambda)?;
        report.l_l = finite("l_l", tape.value(mean).item())?;
        report.l_l_per_class = per_class.iter().map(|&v| tape.value(v).item()).collect();
        terms.push((mean, weights.local));
    }
    if t.disparity_adv {
        let v = loss_modality(model, tape, bound, &pack)?;
        report.l_p = finite("l_p", tape.value(v).item())?;
        terms.push((v, weights.modality));
    }
    if t.disparity_orth {
        let v = loss_orthogonal(tape, &pack)?;
        report.l_d = finite("l_d", tape.value(v).item())?;
        terms.push((v, weights.orthogonal));
    }
    if t.predictor {
        let v = loss_predictor(model, tape, bound, &pack, &batch.labels)?;
        report.l_f = finite("l_f", tape.value(v).item())?;
        terms.push((v, weights.predictor));
    }
    let total = tape.combine(&terms)?;
    report.l_total = finite("l_total", tape.value(total).item())?;
    Ok(Objective {
        total,
        report,
        pack,
        fusion,
        class_mass,
    })
}

/// Non-finite term values abort; the trainer fills in epoch and step.
fn finite(term: &'static str, value: f64) -> Result<f64, Error> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term,
            epoch: 0,
            step: 0,
            value,
        })
    }
}

/// `2(1 - 2L)` with `L` clamped to `[0, 0.5]`.
pub fn a_distance(loss: f64) -> f64 {
    2.0 * (1.0 - 2.0 * loss.clamp(0.0, 0.5))
}

/// Running epoch accumulators and the current dynamic factor μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicFactorState {
    mu: f64,
    global_sum: f64,
    global_steps: usize,
    local_sums: Vec<f64>,
    local_steps: usize,
    class_mass: Vec<f64>,
    pub d_a_global: Option<f64>,
    pub d_a_local_mean: Option<f64>,
}

impl DynamicFactorState {
    /// μ starts at 0.5 before any epoch has been observed.
    pub fn new(classes: usize) -> Self {
        DynamicFactorState {
            mu: 0.5,
            global_sum: 0.0,
            global_steps: 0,
            local_sums: vec![0.0; classes],
            local_steps: 0,
            class_mass: vec![0.0; classes],
            d_a_global: None,
            d_a_local_mean: None,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Adds one step's discriminator losses. μ is unaffected until [`Self::update_mu`].
    pub fn record(&mut self, l_g: Option<f64>, l_local: Option<&[f64]>, class_mass: &[f64]) {
        if let Some(g) = l_g {
            self.global_sum += g;
            self.global_steps += 1;
        }
        if let Some(local) = l_local {
            for (s, l) in self.local_sums.iter_mut().zip(local) {
                *s += l;
            }
            self.local_steps += 1;
        }
        for (m, c) in self.class_mass.iter_mut().zip(class_mass) {
            *m += c;
        }
    }

    /// Epoch boundary: recomputes μ from the epoch-mean losses and resets the
    /// accumulators. A zero denominator (or no observations) keeps μ.
    pub fn update_mu(&mut self) -> f64 {
        let global = (self.global_steps > 0).then(|| self.global_sum / self.global_steps as f64);
        let locals: Vec<f64> = if self.local_steps > 0 {
            self.local_sums
                .iter()
                .zip(&self.class_mass)
                .filter(|(_, &mass)| mass >= EMPTY_CLASS_MASS)
                .map(|(s, _)| s / self.local_steps as f64)
                .collect()
        } else {
            Vec::new()
        };
        match (global, locals.is_empty()) {
            (Some(g), false) => match dynamic_factor(g, &locals) {
                Some(f) => {
                    self.mu = f.mu;
                    self.d_a_global = Some(f.d_global);
                    self.d_a_local_mean = Some(f.d_local_mean);
                }
                None => {
                    self.d_a_global = Some(a_distance(g));
                    self.d_a_local_mean = Some(0.0);
                    warn!("dynamic factor denominator is zero; keeping mu = {}", self.mu);
                }
            },
            _ => warn!("no discriminator losses accumulated this epoch; keeping mu = {}", self.mu),
        }
        self.global_sum = 0.0;
        self.global_steps = 0;
        self.local_sums.iter_mut().for_each(|s| *s = 0.0);
        self.local_steps = 0;
        self.class_mass.iter_mut().for_each(|m| *m = 0.0);
        self.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicFactor {
    pub mu: f64,
    pub d_global: f64,
    pub d_local_mean: f64,
}

/// μ from epoch-mean global and per-class local losses; `None` when both
/// A-distances vanish.
pub fn dynamic_factor(global_loss: f64, local_losses: &[f64]) -> Option<DynamicFactor> {
    let d_global = a_distance(global_loss);
    let d_local_mean = local_losses.iter().map(|&l| a_distance(l)).sum::<f64>() / local_losses.len() as f64;
    let denom = d_global + d_local_mean;
    if !(denom > 0.0) {
        return None;
    }
    Some(DynamicFactor {
        mu: (d_global / denom).clamp(0.0, 1.0),
        d_global,
        d_local_mean,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelConfig;
    use crate::diffcore::gradcheck::uniform;

    fn model(d_in: usize, d: usize, classes: usize) -> FdrlModel {
        FdrlModel::new(
            &ModelConfig {
                d_in,
                d,
                hidden: d,
                classes,
                heads: 2,
            },
            17,
        )
        .unwrap()
    }

    fn zero_disc(m: &mut FdrlModel, disc: crate::model::DiscriminatorParams) {
        for id in [disc.first.weight, disc.first.bias, disc.second.weight, disc.second.bias] {
            m.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn pack_from(tape: &mut Tape, s_a: Tensor, s_t: Tensor, p_a: Tensor, p_t: Tensor) -> LatentPack {
        let batch = s_a.rows();
        let width = s_a.cols();
        LatentPack {
            s_a: tape.constant(s_a),
            s_t: tape.constant(s_t),
            p_a: tape.constant(p_a),
            p_t: tape.constant(p_t),
            batch,
            width,
        }
    }

    #[test]
    fn zero_discriminators_give_ln2() {
        let mut m = model(4, 4, 3);
        let (g, md) = (m.global_disc, m.modality_disc);
        zero_disc(&mut m, g);
        zero_disc(&mut m, md);
        for d in m.local_discs.clone() {
            zero_disc(&mut m, d);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let pack = pack_from(
            &mut tape,
            uniform(&mut rng, 5, 4),
            uniform(&mut rng, 5, 4),
            uniform(&mut rng, 5, 4),
            uniform(&mut rng, 5, 4),
        );
        let g = loss_global_align(&m, &mut tape, &b, pack.s_a, pack.s_t, 1.0).unwrap();
        assert!((tape.value(g).item() - LN_2).abs() < 1e-15);
        let (lp, _) = loss_disparity(&m, &mut tape, &b, &pack).unwrap();
        assert!((tape.value(lp).item() - LN_2).abs() < 1e-15);
        let uniform_p = Tensor::filled(5, 3, 1.0 / 3.0);
        let (mean, per) =
            loss_local_align(&m, &mut tape, &b, pack.s_a, pack.s_t, &uniform_p, &uniform_p, 1.0).unwrap();
        assert!((tape.value(mean).item() - LN_2).abs() < 1e-15);
        for v in per {
            assert!((tape.value(v).item() - LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_local_equals_global() {
        let mut m = model(4, 4, 1);
        // give the lone local discriminator the global one's weights
        let (g, l) = (m.global_disc, m.local_discs[0]);
        for (src, dst) in [
            (g.first.weight, l.first.weight),
            (g.first.bias, l.first.bias),
            (g.second.weight, l.second.weight),
            (g.second.bias, l.second.bias),
        ] {
            let t = m.store.get(src).clone();
            *m.store.get_mut(dst) = t;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let s_a = tape.constant(uniform(&mut rng, 4, 4));
        let s_t = tape.constant(uniform(&mut rng, 4, 4));
        let ones = Tensor::filled(4, 1, 1.0);
        let gl = loss_global_align(&m, &mut tape, &b, s_a, s_t, 1.0).unwrap();
        let (ll, _) = loss_local_align(&m, &mut tape, &b, s_a, s_t, &ones, &ones, 1.0).unwrap();
        assert!((tape.value(gl).item() - tape.value(ll).item()).abs() < 1e-9);
    }

    #[test]
    fn local_align_rejects_class_count_mismatch() {
        let m = model(4, 4, 3);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let s = tape.constant(Tensor::zeros(2, 4));
        let p = Tensor::filled(2, 2, 0.5);
        assert!(matches!(
            loss_local_align(&m, &mut tape, &b, s, s, &p, &p, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn orthogonality_fixtures() {
        let mut tape = Tape::new();
        // orthogonal column spaces
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let p = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, -1.0]]);
        let pack = pack_from(&mut tape, s.clone(), s.clone(), p.clone(), p);
        let ld = loss_orthogonal(&mut tape, &pack).unwrap();
        assert_eq!(tape.value(ld).item(), 0.0);

        // S = P: 2‖SᵀS‖²/B²
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = uniform(&mut rng, 3, 2);
        let gram = s.transpose().matmul(&s).unwrap();
        let expected = 2.0 * gram.values().iter().map(|v| v * v).sum::<f64>() / 9.0;
        let pack = pack_from(&mut tape, s.clone(), s.clone(), s.clone(), s);
        let ld = loss_orthogonal(&mut tape, &pack).unwrap();
        assert!((tape.value(ld).item() - expected).abs() < 1e-14);
        assert!(expected > 0.0);

        // hand fixture: SᵀP = [[0,1],[1,0]] so each Gram term is 2 / B² = 0.5
        let s = Tensor::identity(2);
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let zero = Tensor::zeros(2, 2);
        let pack = pack_from(&mut tape, s, zero.clone(), p, zero);
        let ld = loss_orthogonal(&mut tape, &pack).unwrap();
        assert_eq!(tape.value(ld).item(), 0.5);
    }

    #[test]
    fn predictor_loss_reference_values() {
        let mut m = model(4, 4, 3);
        let lin = m.predictor.linear;
        m.store.get_mut(lin.weight).values_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let pack = pack_from(
            &mut tape,
            uniform(&mut rng, 4, 4),
            uniform(&mut rng, 4, 4),
            uniform(&mut rng, 4, 4),
            uniform(&mut rng, 4, 4),
        );
        let lf = loss_predictor(&m, &mut tape, &b, &pack, &[0, 1, 2, 1]).unwrap();
        assert!((tape.value(lf).item() - 3f64.ln()).abs() < 1e-14);

        // identical branches: S_a + S_t = P_a = P_t
        let m = model(4, 4, 3);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let x = uniform(&mut rng, 4, 4);
        let half = x.map(|v| v / 2.0);
        let pack = pack_from(&mut tape, half.clone(), half, x.clone(), x.clone());
        let lf = loss_predictor(&m, &mut tape, &b, &pack, &[0, 1, 2, 1]).unwrap();
        let xv = tape.constant(x);
        let logits = m.predict_fine(&mut tape, &b, xv).unwrap();
        let single = tape.cross_entropy(logits, &[0, 1, 2, 1]).unwrap();
        assert!((tape.value(lf).item() - tape.value(single).item()).abs() < 1e-14);
    }

    #[test]
    fn total_composition() {
        let unit = LossReport {
            l_task: 1.0,
            l_g: 1.0,
            l_l: 1.0,
            l_p: 1.0,
            l_d: 1.0,
            l_f: 1.0,
            ..LossReport::default()
        };
        let cfg = LossConfig::default();
        assert_eq!(loss_total(&unit, 0.5, &cfg).unwrap(), 4.0);

        let zero = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(loss_total(&unit, 0.3, &zero).unwrap(), 1.0);

        let w = TermWeights::new(1.0, &cfg).unwrap();
        assert_eq!(w.global, 0.0);
        assert_eq!(w.local, 1.0);

        let neg = LossConfig {
            beta: -0.1,
            ..LossConfig::default()
        };
        assert!(matches!(loss_total(&unit, 0.5, &neg), Err(Error::Config(_))));
    }

    #[test]
    fn mu_endpoints() {
        let f = dynamic_factor(0.25, &[0.25, 0.25, 0.25]).unwrap();
        assert_eq!((f.d_global, f.d_local_mean, f.mu), (1.0, 1.0, 0.5));
        assert_eq!(dynamic_factor(0.0, &[0.5, 0.5]).unwrap().mu, 1.0);
        assert_eq!(dynamic_factor(0.5, &[0.1, 0.4]).unwrap().mu, 0.0);
        assert!(dynamic_factor(0.5, &[0.5]).is_none());
        // losses above 0.5 clamp to a zero distance
        assert_eq!(a_distance(0.9), 0.0);
        assert_eq!(a_distance(-0.1), 2.0);
    }

    #[test]
    fn mu_state_updates_only_at_boundaries_and_skips_empty_classes() {
        let mut st = DynamicFactorState::new(3);
        assert_eq!(st.mu(), 0.5);
        st.record(Some(0.0), Some(&[0.5, 0.5, 0.0]), &[1.0, 1.0, 0.0]);
        assert_eq!(st.mu(), 0.5);
        // class 2 has no mass: its perfect (0-loss) discriminator is ignored
        assert_eq!(st.update_mu(), 1.0);
        // accumulators reset: zero-denominator epoch keeps mu
        st.record(Some(0.5), Some(&[0.5, 0.5, 0.5]), &[1.0, 1.0, 1.0]);
        assert_eq!(st.update_mu(), 1.0);
        // nothing recorded keeps mu
        assert_eq!(st.update_mu(), 1.0);
        st.record(Some(0.25), Some(&[0.25; 3]), &[1.0; 3]);
        st.record(Some(0.25), Some(&[0.25; 3]), &[1.0; 3]);
        assert_eq!(st.update_mu(), 0.5);
    }

    #[test]
    fn effective_mu_pins_single_branch() {
        let mut t = LossToggles::default();
        assert_eq!(effective_mu(0.3, &t), 0.3);
        t.alignment_local = false;
        assert_eq!(effective_mu(0.3, &t), 0.0);
        t.alignment_local = true;
        t.alignment_global = false;
        assert_eq!(effective_mu(0.3, &t), 1.0);
    }
}
