use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use hybridq_bench::{random_population, sample_input};
use hybridq_core::hybrid::HybridModel;
use hybridq_core::nsga2::rank_population;
use hybridq_core::qsim::parameter_shift_jacobian;
use hybridq_core::transformer::{Encoder, TransformerConfig};
use hybridq_core::Genome;

fn simulator(c: &mut Criterion) {
    let mut group = c.benchmark_group("statevector");
    for n in [3usize, 6, 10] {
        let g = Genome::ones(n).unwrap();
        let circuit = g.decode().unwrap();
        let params = sample_input(circuit.n_params, 1);
        group.bench_with_input(BenchmarkId::new("expectations", n), &n, |b, _| {
            b.iter(|| circuit.expectations(black_box(&params)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("shift_jacobian", n), &n, |b, _| {
            b.iter(|| parameter_shift_jacobian(&circuit, black_box(&params), &[0, 1]).unwrap())
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let enc = Encoder::new(TransformerConfig::default(), 30).unwrap();
    let x = sample_input(30, 2);
    c.bench_function("encoder_forward_30_tokens", |b| b.iter(|| enc.encode(black_box(&x)).unwrap()));
}

fn hybrid_step(c: &mut Criterion) {
    let mut m = HybridModel::init(&TransformerConfig::default(), 4, Genome::ones(3).unwrap(), 3, 0).unwrap();
    let xs: Vec<Vec<f64>> = (0..32).map(|i| sample_input(4, i)).collect();
    let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
    c.bench_function("hybrid_loss_and_grads_batch32", |b| {
        b.iter(|| {
            m.zero_grad();
            m.loss_and_grads(black_box(&batch)).unwrap()
        })
    });
}

fn sorting(c: &mut Criterion) {
    let pop = random_population(40, 6, 3);
    c.bench_function("rank_population_40", |b| {
        b.iter(|| {
            let mut p = pop.clone();
            rank_population(black_box(&mut p))
        })
    });
}

criterion_group!(benches, simulator, encoder, hybrid_step, sorting);
criterion_main!(benches);
