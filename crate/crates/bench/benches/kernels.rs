use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dapa_core::metrics::ccc;
use dapa_core::{RngStream, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0) as f32)
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_forward_backward");
    for n in [64usize, 256, 512] {
        let (a, b) = (random(&[96, n], 1), random(&[n, n], 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.param(&a), tape.param(&b));
                let y = tape.matmul(va, vb).unwrap();
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn lstm(c: &mut Criterion) {
    let mut group = c.benchmark_group("lstm_96_frames");
    for hidden in [32usize, 64, 128] {
        let input = 2 * hidden;
        let x = random(&[96, input], 3);
        let w_ih = random(&[4 * hidden, input], 4);
        let w_hh = random(&[4 * hidden, hidden], 5);
        let bias = random(&[4 * hidden], 6);
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars = [&x, &w_ih, &w_hh, &bias].map(|t| tape.param(t));
                let h = tape.lstm(vars[0], vars[1], vars[2], vars[3], false).unwrap();
                let s = tape.sum(h);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn concordance(c: &mut Criterion) {
    let mut rng = RngStream::new(7);
    let x: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.normal()).collect();
    c.bench_function("ccc_100k", |b| b.iter(|| black_box(ccc(&x, &y).unwrap())));
}

criterion_group!(benches, matmul, lstm, concordance);
criterion_main!(benches);
