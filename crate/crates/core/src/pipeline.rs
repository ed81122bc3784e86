//! Features in, 2-D embedding out.

use serde::{Deserialize, Serialize};

use crate::embedding::{config_hash, Embedding, EmbeddingSidecar};
use crate::error::{Error, Result, StageExt};
use crate::feature_store::FeatureMatrix;
use crate::fuzzy::{fuzzy_simplicial_set, Calibration};
use crate::neighbor_graph::{knn_descent, knn_exact, Metric, NeighborGraph};
use crate::pca::pca_project;
use crate::tsne::{tsne_embed, TsneConfig};
use crate::umap::{fit_ab, init_embedding, optimize_layout, UmapConfig};

/// Above this many samples `KnnMethod::Auto` switches to NN-descent.
pub const AUTO_EXACT_LIMIT: usize = 20_000;
pub const DESCENT_MAX_ITERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    #[default]
    Umap,
    Pca,
    Tsne,
}

impl std::str::FromStr for EmbedMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "umap" => Ok(EmbedMethod::Umap),
            "pca" => Ok(EmbedMethod::Pca),
            "tsne" => Ok(EmbedMethod::Tsne),
            other => Err(Error::param(format!("unknown embedding method {other:?}"))),
        }
    }
}

impl EmbedMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMethod::Umap => "umap",
            EmbedMethod::Pca => "pca",
            EmbedMethod::Tsne => "tsne",
        }
    }

    /// Pipeline stages in execution order.
    pub fn stages(self) -> &'static [&'static str] {
        match self {
            EmbedMethod::Umap => &["knn", "fuzzy_topology", "layout"],
            EmbedMethod::Pca | EmbedMethod::Tsne => &["layout"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMethod {
    Exact,
    Descent,
    #[default]
    Auto,
}

impl std::str::FromStr for KnnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(KnnMethod::Exact),
            "descent" => Ok(KnnMethod::Descent),
            "auto" => Ok(KnnMethod::Auto),
            other => Err(Error::param(format!("unknown knn method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub method: EmbedMethod,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub knn: KnnMethod,
    #[serde(default)]
    pub umap: UmapConfig,
    #[serde(default)]
    pub tsne: TsneConfig,
}

impl EmbedConfig {
    pub fn umap(umap: UmapConfig) -> Self {
        EmbedConfig {
            umap,
            ..Default::default()
        }
    }

    /// Digest of the settings that affect the chosen method's output.
    pub fn hash(&self) -> String {
        match self.method {
            EmbedMethod::Umap => config_hash(&(self.method, self.metric, self.knn, &self.umap)),
            EmbedMethod::Pca => config_hash(&self.method),
            EmbedMethod::Tsne => config_hash(&(self.method, &self.tsne)),
        }
    }

    pub fn sidecar(&self) -> EmbeddingSidecar {
        let umap = (self.method == EmbedMethod::Umap).then_some(&self.umap);
        EmbeddingSidecar {
            method: self.method.as_str().to_string(),
            k: umap.map(|u| u.k),
            min_dist: umap.map(|u| u.min_dist),
            n_epochs: umap.map(|u| u.n_epochs),
            rng_seed: match self.method {
                EmbedMethod::Umap => self.umap.rng_seed,
                EmbedMethod::Tsne => self.tsne.rng_seed,
                EmbedMethod::Pca => 0,
            },
            config_hash: self.hash(),
        }
    }
}

pub struct EmbedOutput {
    pub embedding: Embedding,
    pub graph: Option<NeighborGraph>,
    pub calibration: Option<Calibration>,
}

pub fn build_knn(m: &FeatureMatrix, cfg: &EmbedConfig) -> Result<NeighborGraph> {
    let k = cfg.umap.k;
    let exact = match cfg.knn {
        KnnMethod::Exact => true,
        KnnMethod::Descent => false,
        KnnMethod::Auto => m.n_samples() <= AUTO_EXACT_LIMIT,
    };
    if exact {
        knn_exact(m, k, cfg.metric)
    } else {
        knn_descent(m, k, cfg.metric, cfg.umap.rng_seed, DESCENT_MAX_ITERS)
    }
}

/// Runs the configured method. Errors are tagged with the failing stage.
pub fn embed(m: &FeatureMatrix, cfg: &EmbedConfig) -> Result<EmbedOutput> {
    let hash = cfg.hash();
    match cfg.method {
        EmbedMethod::Pca => {
            let mut e = pca_project(m).stage("layout")?;
            e.config_hash = hash;
            Ok(EmbedOutput {
                embedding: e,
                graph: None,
                calibration: None,
            })
        }
        EmbedMethod::Tsne => {
            let mut e = tsne_embed(m, &cfg.tsne).stage("layout")?;
            e.config_hash = hash;
            Ok(EmbedOutput {
                embedding: e,
                graph: None,
                calibration: None,
            })
        }
        EmbedMethod::Umap => {
            cfg.umap.validate().stage("knn")?;
            let graph = build_knn(m, cfg).stage("knn")?;
            let (fg, calibration) = fuzzy_simplicial_set(&graph);
            let clamped = calibration.clamped.iter().filter(|&&c| c).count();
            if clamped > 0 {
                log::warn!("{clamped} row(s) hit the bandwidth search bounds");
            }
            let mut embedding = (|| {
                let curve = fit_ab(cfg.umap.min_dist, cfg.umap.spread)?;
                let init = init_embedding(&fg, &cfg.umap, Some(m))?;
                optimize_layout(&fg, &init, &cfg.umap, curve.a, curve.b)
            })()
            .stage("layout")?;
            embedding.config_hash = hash;
            Ok(EmbedOutput {
                embedding,
                graph: Some(graph),
                calibration: Some(calibration),
            })
        }
    }
}
