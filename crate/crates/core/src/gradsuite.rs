//! Finite-difference checks of every loss term against the model's
//! reverse-mode gradients, plus the registry of op-level checks.
//!
//! Terms behind a gradient reversal layer are compared against `-λ` times the
//! numeric derivative for parameters upstream of the reversal (the shared
//! encoder) and against the plain numeric derivative everywhere else.
//! Predictor probabilities that weight the local discriminators are held
//! fixed at their unperturbed values, matching their constant treatment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::diffcore::gradcheck::{self, relative_error, uniform, GradCheckReport, FD_STEP};
use crate::diffcore::{Fault, Tape, Tensor, Var};
use crate::model::{Bound, FdrlModel, ParamId};
use crate::objectives::{
    loss_global_align, loss_local_align, loss_modality, loss_orthogonal, loss_predictor, loss_task, TermWeights,
};
use crate::{Error, Result};

pub const SUITE_BATCH: usize = 4;
const SUITE_LAMBDA: f64 = 0.7;
const SUITE_MU: f64 = 0.3;

/// A small model and 4-sample batch shared by every loss check.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: FdrlModel,
    pub h_a: Tensor,
    pub h_t: Tensor,
    pub labels: Vec<usize>,
    probs_a: Tensor,
    probs_t: Tensor,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            d_in: 5,
            d: 4,
            hidden: 6,
            classes: 3,
            heads: 2,
        };
        let mut model = FdrlModel::new(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
        // Non-zero biases so that no bias gradient is trivially exercised.
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(id).ends_with("bias") {
                let t = model.store.get_mut(id);
                *t = uniform(&mut rng, t.rows(), t.cols()).map(|v| 0.3 * v);
            }
        }
        let h_a = uniform(&mut rng, SUITE_BATCH, cfg.d_in);
        let h_t = uniform(&mut rng, SUITE_BATCH, cfg.d_in);
        let labels = (0..SUITE_BATCH).map(|i| i % cfg.classes).collect();
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let (a, t) = (tape.constant(h_a.clone()), tape.constant(h_t.clone()));
        let pack = model.encode(&mut tape, &bound, a, t)?;
        let probs_a = model.class_probabilities(tape.value(pack.s_a))?;
        let probs_t = model.class_probabilities(tape.value(pack.s_t))?;
        Ok(Fixture {
            model,
            h_a,
            h_t,
            labels,
            probs_a,
            probs_t,
        })
    }
}

/// A weighted loss term; `reversed` terms pass through a gradient reversal.
struct Term {
    var: Var,
    weight: f64,
    reversed: bool,
}

type TermBuilder = fn(&Fixture, &mut Tape, &Bound) -> Result<Vec<Term>>;

fn pack(f: &Fixture, tape: &mut Tape, bound: &Bound) -> Result<crate::model::LatentPack> {
    let a = tape.constant(f.h_a.clone());
    let t = tape.constant(f.h_t.clone());
    f.model.encode(tape, bound, a, t)
}

fn plain(var: Var) -> Vec<Term> {
    vec![Term {
        var,
        weight: 1.0,
        reversed: false,
    }]
}

fn build_global(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    let v = loss_global_align(&f.model, tape, b, p.s_a, p.s_t, SUITE_LAMBDA)?;
    Ok(vec![Term {
        var: v,
        weight: 1.0,
        reversed: true,
    }])
}

fn build_local(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    let (v, _) = loss_local_align(&f.model, tape, b, p.s_a, p.s_t, &f.probs_a, &f.probs_t, SUITE_LAMBDA)?;
    Ok(vec![Term {
        var: v,
        weight: 1.0,
        reversed: true,
    }])
}

fn build_modality(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    Ok(plain(loss_modality(&f.model, tape, b, &p)?))
}

fn build_orthogonal(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    Ok(plain(loss_orthogonal(tape, &p)?))
}

fn build_predictor(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    Ok(plain(loss_predictor(&f.model, tape, b, &p, &f.labels)?))
}

fn build_task(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let p = pack(f, tape, b)?;
    let fused = f.model.fuse(tape, b, &p)?;
    Ok(plain(loss_task(tape, fused.logits, &f.labels)?))
}

fn build_total(f: &Fixture, tape: &mut Tape, b: &Bound) -> Result<Vec<Term>> {
    let w = TermWeights::new(SUITE_MU, &LossConfig::default())?;
    let p = pack(f, tape, b)?;
    let fused = f.model.fuse(tape, b, &p)?;
    let task = loss_task(tape, fused.logits, &f.labels)?;
    let g = loss_global_align(&f.model, tape, b, p.s_a, p.s_t, SUITE_LAMBDA)?;
    let (l, _) = loss_local_align(&f.model, tape, b, p.s_a, p.s_t, &f.probs_a, &f.probs_t, SUITE_LAMBDA)?;
    let m = loss_modality(&f.model, tape, b, &p)?;
    let o = loss_orthogonal(tape, &p)?;
    let pr = loss_predictor(&f.model, tape, b, &p, &f.labels)?;
    let term = |var, weight, reversed| Term { var, weight, reversed };
    Ok(vec![
        term(task, w.task, false),
        term(g, w.global, true),
        term(l, w.local, true),
        term(m, w.modality, false),
        term(o, w.orthogonal, false),
        term(pr, w.predictor, false),
    ])
}

fn trainable(model: &FdrlModel, name: &str) -> Vec<ParamId> {
    let m = model;
    let mut ids: Vec<ParamId> = m.shared.params().to_vec();
    match name {
        "loss_global_align" => ids.extend(m.global_disc.params()),
        "loss_local_align" => ids.extend(m.local_discs.iter().flat_map(|d| d.params())),
        "loss_modality" => {
            ids.clear();
            ids.extend(m.private_a.params());
            ids.extend(m.private_t.params());
            ids.extend(m.modality_disc.params());
        }
        "loss_orthogonal" => {
            ids.extend(m.private_a.params());
            ids.extend(m.private_t.params());
        }
        "loss_predictor" => {
            ids.extend(m.private_a.params());
            ids.extend(m.private_t.params());
            ids.extend(m.predictor.linear.params());
        }
        _ => ids = m.store.ids().collect(),
    }
    ids
}

fn check_terms(name: &str, seed: u64, build: TermBuilder, fault: Option<Fault>) -> Result<GradCheckReport> {
    let f = Fixture::new(seed)?;
    let ids = trainable(&f.model, name);
    let upstream = f.model.shared.params();

    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let bound = f.model.store.bind_selected(&mut tape, &ids);
    let terms = build(&f, &mut tape, &bound)?;
    let weighted: Vec<(Var, f64)> = terms.iter().map(|t| (t.var, t.weight)).collect();
    let total = tape.combine(&weighted)?;
    tape.backward(total)?;
    let analytic = bound.gradients(&tape);

    let eval = |model: &FdrlModel| -> Result<Vec<f64>> {
        let g = Fixture { model: model.clone(), ..f.clone() };
        let mut tape = Tape::new();
        let bound = g.model.store.bind_frozen(&mut tape);
        Ok(build(&g, &mut tape, &bound)?
            .iter()
            .map(|t| tape.value(t.var).item())
            .collect())
    };

    let mut work = f.model.clone();
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for &id in &ids {
        let reverse_scale = if upstream.contains(&id) { -SUITE_LAMBDA } else { 1.0 };
        for e in 0..work.store.get(id).len() {
            let orig = work.store.get(id).values()[e];
            work.store.get_mut(id).values_mut()[e] = orig + FD_STEP;
            let up = eval(&work)?;
            work.store.get_mut(id).values_mut()[e] = orig - FD_STEP;
            let down = eval(&work)?;
            work.store.get_mut(id).values_mut()[e] = orig;
            let numeric: f64 = terms
                .iter()
                .zip(up.iter().zip(&down))
                .map(|(t, (u, d))| {
                    let scale = if t.reversed { reverse_scale } else { 1.0 };
                    t.weight * scale * (u - d) / (2.0 * FD_STEP)
                })
                .sum();
            max_rel = max_rel.max(relative_error(analytic[index_of(&f.model, id)][e], numeric));
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        entries,
    })
}

fn index_of(model: &FdrlModel, id: ParamId) -> usize {
    model.store.ids().position(|x| x == id).expect("id from this store")
}

type SuiteCheck = Box<dyn Fn(u64, Option<Fault>) -> Result<GradCheckReport> + Send + Sync>;

/// Loss-term checks, named after the functions they exercise.
pub fn loss_checks() -> Vec<(&'static str, SuiteCheck)> {
    let entries: [(&'static str, TermBuilder); 7] = [
        ("loss_global_align", build_global),
        ("loss_local_align", build_local),
        ("loss_modality", build_modality),
        ("loss_orthogonal", build_orthogonal),
        ("loss_predictor", build_predictor),
        ("loss_task", build_task),
        ("loss_total", build_total),
    ];
    entries
        .into_iter()
        .map(|(name, build)| {
            let check: SuiteCheck = Box::new(move |seed, fault| check_terms(name, seed, build, fault));
            (name, check)
        })
        .collect()
}

/// Every registered check: diffcore ops, then loss terms.
pub fn all_checks() -> Vec<(&'static str, SuiteCheck)> {
    let mut out: Vec<(&'static str, SuiteCheck)> = gradcheck::op_checks()
        .into_iter()
        .map(|(name, f)| {
            let check: SuiteCheck = Box::new(move |seed, fault| Ok(f(seed, fault)?));
            (name, check)
        })
        .collect();
    out.extend(loss_checks());
    out
}

pub fn check_names() -> Vec<&'static str> {
    all_checks().into_iter().map(|(n, _)| n).collect()
}

/// Runs the named checks (all when `only` is `None`).
pub fn run(only: Option<&str>, seed: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let checks = all_checks();
    if let Some(name) = only {
        if !checks.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("unknown gradient check '{name}'")));
        }
    }
    checks
        .iter()
        .filter(|(n, _)| only.is_none_or(|o| o == *n))
        .map(|(_, c)| c(seed, fault))
        .collect()
}

/// Largest elementwise gap between shared-encoder gradients of `L_g` with the
/// reversal layer at `lambda` and `-lambda` times those with the reversal
/// replaced by identity.
pub fn grl_contract_gap(seed: u64, lambda: f64) -> Result<f64> {
    let f = Fixture::new(seed)?;
    let ids = f.model.shared.params();
    let grads = |reversal: Option<f64>| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = f.model.store.bind_selected(&mut tape, &ids);
        let p = pack(&f, &mut tape, &bound)?;
        let loss = match reversal {
            Some(l) => loss_global_align(&f.model, &mut tape, &bound, p.s_a, p.s_t, l)?,
            None => {
                let s = tape.concat_rows(&[p.s_a, p.s_t])?;
                let logits = f.model.global_disc.forward(&mut tape, &bound, s)?;
                tape.cross_entropy(logits, &crate::model::modality_labels(p.batch))?
            }
        };
        tape.backward(loss)?;
        let all = bound.gradients(&tape);
        Ok(ids.iter().map(|&id| all[index_of(&f.model, id)].clone()).collect())
    };
    let reversed = grads(Some(lambda))?;
    let identity = grads(None)?;
    Ok(reversed
        .iter()
        .flatten()
        .zip(identity.iter().flatten())
        .map(|(r, i)| (r - (-lambda * i)).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_term_passes() {
        for (name, check) in loss_checks() {
            for seed in [1, 2] {
                let r = check(seed, None).unwrap();
                assert!(r.passed(), "{name} seed {seed}: {}", r.max_rel_error);
                assert!(r.entries > 0);
            }
        }
    }

    #[test]
    fn corrupted_relu_fails_loss_checks() {
        let r = check_terms("loss_task", 1, build_task, Some(Fault::ReluBackward)).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn grl_contract_holds() {
        for lambda in [0.0, 0.4, 1.0, 2.5] {
            assert!(grl_contract_gap(3, lambda).unwrap() < 1e-9);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(run(Some("nope"), 0, None), Err(Error::Config(_))));
        assert_eq!(run(Some("relu"), 0, None).unwrap().len(), 1);
    }
}
