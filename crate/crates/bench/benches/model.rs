use advecta_bench::grid9_fixture;
use advecta_core::training::{batch_gradient, sample_gradient};
use advecta_core::WindowSample;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("grid9");
    for d in [8, 16, 32] {
        let (model, windows) = grid9_fixture(d, 1200);
        let w = &windows[0];
        group.bench_with_input(BenchmarkId::new("forward", d), &d, |b, _| b.iter(|| model.forward(black_box(w)).unwrap()));
        group.bench_with_input(BenchmarkId::new("forward_backward", d), &d, |b, _| {
            b.iter(|| sample_gradient(&model, black_box(w)).unwrap())
        });
    }
    let (model, windows) = grid9_fixture(16, 1200);
    let batch: Vec<&WindowSample> = windows.iter().take(32).collect();
    for parallel in [false, true] {
        group.bench_function(BenchmarkId::new("batch32", if parallel { "rayon" } else { "serial" }), |b| {
            b.iter(|| batch_gradient(&model, black_box(&batch), 1e-3, parallel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
