//! UMAP layout: output-curve fitting, initialization and SGD optimization of
//! a 2-D layout against a [`FuzzyGraph`](crate::fuzzy::FuzzyGraph).

mod curve;
mod init;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curve::{curve_grid, fit_ab, phi, target_curve, CurveFit, CURVE_SAMPLES};
pub use init::{init_embedding, spectral_layout};
pub use optimize::{
    attractive_coeff, log_one_minus_phi, log_phi, optimize_layout, repulsive_coeff, GRADIENT_CLIP,
    REPULSION_DISTANCE_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    #[default]
    Spectral,
    Random,
    Pca,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(InitMethod::Spectral),
            "random" => Ok(InitMethod::Random),
            "pca" => Ok(InitMethod::Pca),
            other => Err(Error::param(format!("unknown init method {other:?}"))),
        }
    }
}

/// How the SGD epochs are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// One worker, canonical edge order: byte-reproducible.
    #[default]
    Deterministic,
    /// Lock-free parallel updates; results vary from run to run.
    Fast,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(ExecMode::Deterministic),
            "fast" => Ok(ExecMode::Fast),
            other => Err(Error::param(format!("unknown execution mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    pub k: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub init: InitMethod,
    pub rng_seed: u64,
    #[serde(default)]
    pub mode: ExecMode,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig {
            k: 10,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: 200,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            init: InitMethod::Spectral,
            rng_seed: 42,
            mode: ExecMode::Deterministic,
        }
    }
}

impl UmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::param(format!("k must be at least 2 (got {})", self.k)));
        }
        if !(self.min_dist > 0.0 && self.min_dist < self.spread) {
            return Err(Error::param(format!(
                "need 0 < min_dist < spread (min_dist = {}, spread = {})",
                self.min_dist, self.spread
            )));
        }
        if self.n_epochs == 0 {
            return Err(Error::param("n_epochs must be at least 1"));
        }
        if self.negative_sample_rate == 0 {
            return Err(Error::param("negative_sample_rate must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        Ok(())
    }
}
