use criterion::{criterion_group, criterion_main, Criterion};
use curate_bench::features;
use curate_core::fuzzy::{calibrate_smooth_knn, fuzzy_simplicial_set};
use curate_core::neighbor_graph::knn_exact;
use curate_core::Metric;

fn fuzzy(c: &mut Criterion) {
    let graph = knn_exact(&features(10_000, 32), 15, Metric::Euclidean).unwrap();
    c.bench_function("smooth_knn_calibration/10000x15", |b| {
        b.iter(|| calibrate_smooth_knn(&graph))
    });
    c.bench_function("fuzzy_simplicial_set/10000x15", |b| {
        b.iter(|| fuzzy_simplicial_set(&graph))
    });
}

criterion_group!(benches, fuzzy);
criterion_main!(benches);
