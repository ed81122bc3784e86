//! Neighbor-embedding toolkit for finding outliers and mislabeled samples in
//! image datasets: feature files, kNN graphs, UMAP / t-SNE / PCA layouts,
//! density clustering of the layout and seed-based mislabel probes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binfmt;
pub mod embedding;
pub mod error;
pub mod feature_store;
pub mod fixtures;
pub mod fuzzy;
pub mod neighbor_graph;
pub mod pca;
pub mod pipeline;
pub mod run;
pub mod satellite;
pub mod seed_probe;
mod spatial;
pub mod tsne;
pub mod umap;

pub use embedding::Embedding;
pub use error::{Error, ErrorClass, Result};
pub use feature_store::{Dataset, DatasetManifest, FeatureMatrix, ManifestEntry};
pub use fuzzy::FuzzyGraph;
pub use neighbor_graph::{Metric, NeighborGraph};
pub use pipeline::EmbedConfig;
pub use satellite::ClusterReport;
pub use seed_probe::SeedProbeResult;
pub use umap::UmapConfig;
