use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fdrl_core::config::ModelConfig;
use fdrl_core::datasets::{generate_synthetic, SynthSpec};
use fdrl_core::diffcore::kernels::{matmul_into_par, matmul_into_seq};
use fdrl_core::model::FdrlModel;
use fdrl_core::trainer::{evaluate_with, Execution};

fn operand(len: usize, salt: usize) -> Vec<f64> {
    (0..len).map(|i| ((i * 7919 + salt) % 211) as f64 / 37.0 - 2.5).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &size in &[64usize, 256, 512] {
        let (m, k, n) = (size, size, size);
        let a = operand(m * k, 1);
        let b = operand(k * n, 2);
        let mut out = vec![0.0; m * n];
        group.bench_with_input(BenchmarkId::new("sequential", size), &size, |bench, _| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_into_seq(black_box(&a), black_box(&b), &mut out, m, k, n);
            })
        });
        group.bench_with_input(BenchmarkId::new("rayon", size), &size, |bench, _| {
            bench.iter(|| {
                out.fill(0.0);
                matmul_into_par(black_box(&a), black_box(&b), &mut out, m, k, n);
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let spec = SynthSpec {
        samples: 4000,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec, 1);
    let cfg = ModelConfig {
        d_in: spec.d_in,
        classes: spec.classes,
        ..ModelConfig::default()
    };
    let model = FdrlModel::new(&cfg, 0).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    for (name, exec) in [("sequential", Execution::Sequential), ("rayon", Execution::Parallel)] {
        group.bench_function(name, |bench| {
            bench.iter(|| evaluate_with(&model, &data, black_box(&idx), 64, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, evaluation);
criterion_main!(benches);
