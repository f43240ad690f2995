//! Data-parallel kernels against the sequential fallback.
//!
//! Without the `parallel` feature both arms run the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use epan::eval::{self, Metric};
use epan::exec::Exec;
use epan::gradsuite;
use epan::model::{EpanModel, ModelConfig};
use epan::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0)))
        .collect()
}

fn forward(c: &mut Criterion) {
    let model = EpanModel::new(ModelConfig::default(), 0).unwrap();
    let imgs = images(16, model.config.input_h, model.config.input_w, 1);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let mut g = c.benchmark_group("eval_forward_16x64x64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.run_eval(black_box(&refs), exec).unwrap())
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nq, ng, d) = (400, 4000, 128);
    let q = Tensor::from_fn(&[nq, d], |_| rng.random_range(-1.0..1.0));
    let gl = Tensor::from_fn(&[ng, d], |_| rng.random_range(-1.0..1.0));
    let qp: Vec<i64> = (0..nq).map(|i| (i % 100) as i64).collect();
    let gp: Vec<i64> = (0..ng).map(|i| (i % 100) as i64).collect();
    let qc = vec![1u32; nq];
    let gc = vec![2u32; ng];
    let mut g = c.benchmark_group("distance_and_evaluate_400x4000");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let dm = eval::distance_matrix(&q, &gl, Metric::Euclidean, exec).unwrap();
                eval::evaluate(&dm.matrix, &qp, &qc, &gp, &gc, 10, Metric::Euclidean, exec).unwrap()
            })
        });
    }
    g.finish();
}

fn gradient_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradient_suite_primitives_2_seeds");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| gradsuite::run_primitives(black_box(&[0, 1]), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward, retrieval, gradient_suite);
criterion_main!(benches);
