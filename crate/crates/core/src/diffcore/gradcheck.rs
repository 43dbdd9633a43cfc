//! Central finite-difference checks for reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Fault, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients that are zero
/// up to round-off are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// ReLU inputs closer than this to the kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `build` against central finite differences,
/// perturbing every entry of every input. `build` must return a scalar.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    fault: Option<Fault>,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[ti].values()[ei];
            work[ti].values_mut()[ei] = orig + FD_STEP;
            let up = eval(&work)?;
            work[ti].values_mut()[ei] = orig - FD_STEP;
            let down = eval(&work)?;
            work[ti].values_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(a, numeric));
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        entries,
    })
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Uniform in [-1, 1] with entries near zero pushed out of the ReLU kink band.
pub fn uniform_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() >= KINK_MARGIN {
            break v;
        }
    })
}

/// Reduces `out` to a scalar through a fixed random projection so that every
/// output entry carries a distinct weight.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (_, cols) = tape.shape(out);
    let r = tape.constant(uniform(&mut rng, cols, 1));
    let y = tape.matmul(out, r)?;
    Ok(tape.sum(y))
}

type OpCheck = fn(u64, Option<Fault>) -> Result<GradCheckReport, DiffError>;

/// Named finite-difference checks for every differentiable op.
pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", check_matmul),
        ("relu", check_relu),
        ("softmax_rows", check_softmax),
        ("cross_entropy", check_cross_entropy),
        ("cross_entropy_weighted", check_cross_entropy_weighted),
        ("frobenius_sq", check_frobenius),
        ("grad_reverse", check_grad_reverse),
        ("add", check_add),
        ("add_row", check_add_row),
        ("add_const", check_add_const),
        ("scale", check_scale),
        ("scale_rows", check_scale_rows),
        ("mean_rows", check_mean_rows),
        ("sum", check_sum),
        ("transpose", check_transpose),
        ("concat_rows", check_concat_rows),
        ("concat_cols", check_concat_cols),
        ("slice_rows", check_slice_rows),
        ("slice_cols", check_slice_cols),
        ("gather_rows", check_gather_rows),
        ("reshape", check_reshape),
        ("combine", check_combine),
        ("shared_parameter", check_shared_parameter),
    ]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_matmul(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 4, 3), uniform(&mut r, 3, 5)];
    check(
        "matmul",
        &inputs,
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        },
        fault,
    )
}

fn check_relu(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform_off_kink(&mut r, 4, 5)];
    check(
        "relu",
        &inputs,
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_softmax(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 4)];
    check(
        "softmax_rows",
        &inputs,
        |t, v| {
            let y = t.softmax_rows(v[0]);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_cross_entropy(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 5, 3)];
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
    check(
        "cross_entropy",
        &inputs,
        move |t, v| t.cross_entropy(v[0], &labels),
        fault,
    )
}

fn check_cross_entropy_weighted(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 5, 3)];
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
    let weights: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
    check(
        "cross_entropy_weighted",
        &inputs,
        move |t, v| t.cross_entropy_weighted(v[0], &labels, &weights),
        fault,
    )
}

fn check_frobenius(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 3)];
    check("frobenius_sq", &inputs, |t, v| Ok(t.frobenius_sq(v[0])), fault)
}

fn check_grad_reverse(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    grad_reverse_exact(seed, 0.75, fault)
}

/// Checks `d/dx P(grl(x))` equals `-lambda` times the finite-difference derivative
/// of the identity-forward graph.
fn grad_reverse_exact(
    seed: u64,
    lambda: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let x = uniform(&mut r, 4, 3);
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let xv = tape.param(x.clone());
    let g = tape.grad_reverse(xv, lambda)?;
    let y = project(&mut tape, g, seed)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).expect("reachable").to_vec();

    let eval = |x: &Tensor| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = project(&mut t, v, seed)?;
        Ok(t.value(y).item())
    };
    let mut work = x;
    let mut max_rel: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + FD_STEP;
        let up = eval(&work)?;
        work.values_mut()[i] = orig - FD_STEP;
        let down = eval(&work)?;
        work.values_mut()[i] = orig;
        let numeric = -lambda * (up - down) / (2.0 * FD_STEP);
        max_rel = max_rel.max(relative_error(a, numeric));
    }
    Ok(GradCheckReport {
        name: "grad_reverse".into(),
        max_rel_error: max_rel,
        entries: analytic.len(),
    })
}

fn check_add(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 4), uniform(&mut r, 3, 4)];
    check(
        "add",
        &inputs,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_add_row(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 4, 3), uniform(&mut r, 1, 3)];
    check(
        "add_row",
        &inputs,
        |t, v| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y, seed)
        },
        fault,
    )
}

fn check_add_const(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let c = uniform(&mut r, 3, 3);
    let inputs = [uniform(&mut r, 3, 3)];
    check(
        "add_const",
        &inputs,
        move |t, v| {
            let y = t.add_const(v[0], &c)?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_scale(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 2)];
    check(
        "scale",
        &inputs,
        |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_scale_rows(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..1.0)).collect();
    let inputs = [uniform(&mut r, 4, 3)];
    check(
        "scale_rows",
        &inputs,
        move |t, v| {
            let y = t.scale_rows(v[0], &weights)?;
            project(t, y, seed)
        },
        fault,
    )
}

fn check_mean_rows(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 5, 3)];
    check(
        "mean_rows",
        &inputs,
        |t, v| {
            let y = t.mean_rows(v[0]);
            Ok(t.frobenius_sq(y))
        },
        fault,
    )
}

fn check_sum(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 3)];
    check(
        "sum",
        &inputs,
        |t, v| {
            let y = t.softmax_rows(v[0]);
            let y = t.frobenius_sq(y);
            let s = t.sum(y);
            Ok(t.scale(s, 3.0))
        },
        fault,
    )
}

fn check_transpose(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 4)];
    check(
        "transpose",
        &inputs,
        |t, v| {
            let y = t.transpose(v[0]);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_concat_rows(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 2, 3), uniform(&mut r, 3, 3)];
    check(
        "concat_rows",
        &inputs,
        |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_concat_cols(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 2), uniform(&mut r, 3, 3)];
    check(
        "concat_cols",
        &inputs,
        |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_slice_rows(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 5, 3)];
    check(
        "slice_rows",
        &inputs,
        |t, v| {
            let y = t.slice_rows(v[0], 1, 3)?;
            project(t, y, seed)
        },
        fault,
    )
}

fn check_slice_cols(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 5)];
    check(
        "slice_cols",
        &inputs,
        |t, v| {
            let y = t.slice_cols(v[0], 2, 2)?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_gather_rows(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 4, 3)];
    check(
        "gather_rows",
        &inputs,
        |t, v| {
            let y = t.gather_rows(v[0], &[3, 0, 0, 2, 1, 3])?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_reshape(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 4, 3)];
    check(
        "reshape",
        &inputs,
        |t, v| {
            let y = t.reshape(v[0], 2, 6)?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_combine(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 3), uniform(&mut r, 3, 3)];
    check(
        "combine",
        &inputs,
        |t, v| {
            let y = t.combine(&[(v[0], 0.3), (v[1], -2.0)])?;
            let y = t.softmax_rows(y);
            project(t, y, seed)
        },
        fault,
    )
}

fn check_shared_parameter(seed: u64, fault: Option<Fault>) -> Result<GradCheckReport, DiffError> {
    // x enters the graph twice: x·xᵀ, plus a second matmul path.
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, 3, 4), uniform(&mut r, 4, 2)];
    check(
        "shared_parameter",
        &inputs,
        |t, v| {
            let xt = t.transpose(v[0]);
            let gram = t.matmul(v[0], xt)?;
            let proj = t.matmul(v[0], v[1])?;
            let a = project(t, gram, seed)?;
            let b = project(t, proj, seed + 1)?;
            t.add(a, b)
        },
        fault,
    )
}
