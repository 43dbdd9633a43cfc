use fdrl_core::config::OptimConfig;
use fdrl_core::diffcore::{Tape, Tensor};
use fdrl_core::trainer::AdamW;

/// AdamW on f(x) = x², stepped with the update written out by hand.
#[test]
fn adamw_matches_hand_stepped_quadratic() {
    let cfg = OptimConfig {
        lr: 0.1,
        weight_decay: 0.01,
        ..OptimConfig::default()
    };
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let mut opt = AdamW::new(&cfg);
    let mut params = vec![Tensor::from_rows(&[vec![1.5, -0.7]])];

    let (mut x, mut m, mut v) = ([1.5f64, -0.7], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=50 {
        let mut tape = Tape::new();
        let p = tape.param(params[0].clone());
        let loss = tape.frobenius_sq(p);
        tape.backward(loss).unwrap();
        let grad = tape.grad(p).unwrap().to_vec();
        opt.step(&mut params, &[grad]);

        for j in 0..2 {
            let g = 2.0 * x[j];
            x[j] -= 0.1 * 0.01 * x[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / (1.0 - b1.powi(t));
            let v_hat = v[j] / (1.0 - b2.powi(t));
            x[j] -= 0.1 * m_hat / (v_hat.sqrt() + eps);
        }
        for j in 0..2 {
            assert!((params[0].values()[j] - x[j]).abs() < 1e-12, "step {t}");
        }
    }
    assert_eq!(opt.steps(), 50);
    assert!(x.iter().all(|v| v.abs() < 0.5));
}

#[test]
fn first_step_moves_each_coordinate_by_lr() {
    let mut opt = AdamW::new(&OptimConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..OptimConfig::default()
    });
    let mut p = vec![Tensor::from_rows(&[vec![3.0, -2.0, 0.5]])];
    opt.step(&mut p, &[vec![10.0, -0.001, 4.0]]);
    let expect = [2.99, -1.99, 0.49];
    for (a, b) in p[0].values().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6);
    }
}
