use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use curate_bench::features;
use curate_core::neighbor_graph::{knn_descent, knn_exact};
use curate_core::Metric;

fn knn(c: &mut Criterion) {
    let mut g = c.benchmark_group("knn");
    g.sample_size(10);
    for n in [2_000, 8_000] {
        let m = features(n, 64);
        g.bench_with_input(BenchmarkId::new("exact", n), &m, |b, m| {
            b.iter(|| knn_exact(m, 10, Metric::Euclidean).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("descent", n), &m, |b, m| {
            b.iter(|| knn_descent(m, 10, Metric::Euclidean, 42, 12).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, knn);
criterion_main!(benches);
