//! Compare the parallel map against the sequential fallback on a
//! sweep-shaped workload. Filled out once the sweep kernels land.

use criterion::{criterion_group, criterion_main, Criterion};

fn bench_maps(c: &mut Criterion) {
    let work = |i: usize| {
        let mut acc = 0.0f64;
        for k in 0..200 {
            acc += ((i * 31 + k) as f64).sqrt().sin();
        }
        acc
    };
    c.bench_function("seq_map_smoke", |b| {
        b.iter(|| purcellsim_core::par::seq_map(256, work))
    });
    c.bench_function("par_map_smoke", |b| {
        b.iter(|| purcellsim_core::par::par_map(256, work))
    });
}

criterion_group!(benches, bench_maps);
criterion_main!(benches);
