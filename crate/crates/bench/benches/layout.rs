use criterion::{criterion_group, criterion_main, Criterion};
use curate_bench::features;
use curate_core::fuzzy::fuzzy_simplicial_set;
use curate_core::neighbor_graph::knn_exact;
use curate_core::pca::pca_project;
use curate_core::tsne::{tsne_embed, TsneConfig};
use curate_core::umap::{fit_ab, init_embedding, optimize_layout, ExecMode, UmapConfig};
use curate_core::Metric;

fn layout(c: &mut Criterion) {
    let m = features(5_000, 32);
    let graph = knn_exact(&m, 10, Metric::Euclidean).unwrap();
    let (fg, _) = fuzzy_simplicial_set(&graph);
    let mut g = c.benchmark_group("layout");
    g.sample_size(10);
    for mode in [ExecMode::Deterministic, ExecMode::Fast] {
        let cfg = UmapConfig {
            n_epochs: 100,
            mode,
            ..Default::default()
        };
        let fit = fit_ab(cfg.min_dist, cfg.spread).unwrap();
        let init = init_embedding(&fg, &cfg, Some(&m)).unwrap();
        g.bench_function(format!("umap_sgd_{mode:?}/5000x100").to_lowercase(), |b| {
            b.iter(|| optimize_layout(&fg, &init, &cfg, fit.a, fit.b).unwrap())
        });
    }
    g.bench_function("spectral_init/5000", |b| {
        b.iter(|| init_embedding(&fg, &UmapConfig::default(), None).unwrap())
    });
    g.bench_function("pca/5000x32", |b| b.iter(|| pca_project(&m).unwrap()));
    let small = features(500, 32);
    let tsne = TsneConfig {
        early_steps: 50,
        main_steps: 100,
        momentum_switch: 50,
        ..Default::default()
    };
    g.bench_function("tsne/500x150", |b| b.iter(|| tsne_embed(&small, &tsne).unwrap()));
    g.finish();
}

criterion_group!(benches, layout);
criterion_main!(benches);
