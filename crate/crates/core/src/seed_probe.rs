//! Mislabel search by seeding.
//!
//! Reference points with a known label are merged into a target set and the
//! union is embedded. Target points whose embedding neighborhood is dominated
//! by seeds are reported as likely carrying the seed label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{save_embedding, Embedding};
use crate::error::{Error, Result, StageExt};
use crate::feature_store::{merge_datasets, save_features, save_manifest, Dataset, DatasetManifest};
use crate::pipeline::{embed, EmbedConfig};
use crate::satellite::{detect, DetectConfig};
use crate::spatial;

pub const SEED_PROBE_STAGES: &[&str] = &["merge", "knn", "fuzzy_topology", "layout", "probe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub k_vote: usize,
    pub vote_threshold: f64,
    pub seed_label: String,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k_vote: 10,
            vote_threshold: 0.5,
            seed_label: "seed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub id: String,
    pub seed_vote_fraction: f64,
    /// Density cluster of the point in the joint embedding, when computed.
    pub cluster_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProbeResult {
    pub flagged: Vec<FlaggedPoint>,
    pub config: ProbeConfig,
}

/// Flags non-seed points with at least `vote_threshold` seeds among their
/// `k_vote` nearest embedding neighbors. Sorted by descending fraction, then id.
pub fn probe_mislabels(e: &Embedding, manifest: &DatasetManifest, cfg: &ProbeConfig) -> Result<SeedProbeResult> {
    let n = e.len();
    if manifest.len() != n {
        return Err(Error::Alignment(format!(
            "embedding has {n} points, manifest has {} entries",
            manifest.len()
        )));
    }
    let seeds = manifest.entries.iter().filter(|m| m.is_seed).count();
    if seeds == 0 || seeds == n {
        return Err(Error::param(format!(
            "probe needs at least one seed and one target point ({seeds} seeds of {n})"
        )));
    }
    if cfg.k_vote == 0 || cfg.k_vote >= n {
        return Err(Error::param(format!("k_vote must be in 1..{n} (got {})", cfg.k_vote)));
    }
    if !(0.0..=1.0).contains(&cfg.vote_threshold) {
        return Err(Error::param(format!(
            "vote_threshold must be in [0, 1] (got {})",
            cfg.vote_threshold
        )));
    }
    let neighbors = spatial::k_nearest(&e.to_f64(), cfg.k_vote);
    let mut flagged: Vec<FlaggedPoint> = neighbors
        .iter()
        .enumerate()
        .filter(|&(i, _)| !manifest.entries[i].is_seed)
        .filter_map(|(i, nb)| {
            let votes = nb.iter().filter(|&&(j, _)| manifest.entries[j].is_seed).count();
            let fraction = votes as f64 / cfg.k_vote as f64;
            (fraction >= cfg.vote_threshold).then(|| FlaggedPoint {
                id: manifest.entries[i].id.clone(),
                seed_vote_fraction: fraction,
                cluster_id: None,
            })
        })
        .collect();
    flagged.sort_by(|a, b| {
        b.seed_vote_fraction
            .total_cmp(&a.seed_vote_fraction)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(SeedProbeResult {
        flagged,
        config: cfg.clone(),
    })
}

#[derive(Serialize)]
struct ProbeRunConfig<'a> {
    embed: &'a EmbedConfig,
    probe: &'a ProbeConfig,
}

/// Merge, embed jointly, probe. With `run_dir`, writes `config.json`,
/// `merged.featmat`, `merged.manifest.jsonl`, `embedding.emb` and
/// `probe_result.json` there.
pub fn run_seed_probe(
    target: &Dataset,
    seeds: &Dataset,
    embed_cfg: &EmbedConfig,
    probe_cfg: &ProbeConfig,
    run_dir: Option<&Path>,
) -> Result<SeedProbeResult> {
    if target.is_empty() {
        return Err(Error::param("target set has no points")).stage("merge");
    }
    if seeds.is_empty() {
        return Err(Error::param("seed set has no points")).stage("merge");
    }
    let target_sources: std::collections::BTreeSet<&str> =
        target.manifest.entries.iter().map(|e| e.source.as_str()).collect();
    if seeds
        .manifest
        .entries
        .iter()
        .any(|e| target_sources.contains(e.source.as_str()))
    {
        log::warn!("seeds share a source tag with the target set; seeds from a different dataset separate better");
    }
    let merged = merge_datasets(target, seeds, &probe_cfg.seed_label).stage("merge")?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        if let Some(dir) = run_dir {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = ProbeRunConfig {
            embed: embed_cfg,
            probe: probe_cfg,
        };
        write("config.json", &serde_json::to_vec_pretty(&config)?)?;
        save_features(&merged.features, dir.join("merged.featmat"))?;
        save_manifest(&merged.manifest, dir.join("merged.manifest.jsonl"))?;
    }
    let out = embed(&merged.features, embed_cfg)?;
    if let Some(dir) = run_dir {
        save_embedding(&out.embedding, &embed_cfg.sidecar(), dir.join("embedding.emb"))?;
    }
    let mut result = probe_mislabels(&out.embedding, &merged.manifest, probe_cfg).stage("probe")?;
    match detect(&out.embedding, &merged.manifest, &DetectConfig::default()) {
        Ok(report) => {
            let index: std::collections::HashMap<&str, usize> = merged
                .manifest
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| (e.id.as_str(), i))
                .collect();
            for f in &mut result.flagged {
                f.cluster_id = index.get(f.id.as_str()).map(|&i| report.labels[i]);
            }
        }
        Err(e) => log::warn!("could not cluster the joint embedding: {e}"),
    }
    write("probe_result.json", &serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::ManifestEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Target blob at the origin, seed blob at (50, 0), `planted` target
    /// points placed inside the seed blob.
    fn planted_layout(n_target: usize, n_seed: usize, planted: &[usize]) -> (Embedding, DatasetManifest) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut entries = Vec::new();
        for i in 0..n_target {
            let cx = if planted.contains(&i) { 50.0 } else { 0.0 };
            pts.push([cx + normal.sample(&mut rng), normal.sample(&mut rng)]);
            entries.push(ManifestEntry::bare(format!("t{i:03}"), "target"));
        }
        for i in 0..n_seed {
            pts.push([50.0 + normal.sample(&mut rng), normal.sample(&mut rng)]);
            entries.push(ManifestEntry {
                is_seed: true,
                ..ManifestEntry::bare(format!("s{i:03}"), "seeds")
            });
        }
        (
            Embedding::new(pts, "test", "", 0).unwrap(),
            DatasetManifest::new(entries).unwrap(),
        )
    }

    #[test]
    fn planted_points_flagged() {
        let (e, m) = planted_layout(200, 50, &[17, 101]);
        let r = probe_mislabels(&e, &m, &ProbeConfig::default()).unwrap();
        let ids: Vec<&str> = r.flagged.iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids, ["t017", "t101"]);
        assert!(r.flagged.iter().all(|f| f.seed_vote_fraction == 1.0));
    }

    #[test]
    fn far_seeds_flag_nothing() {
        let (e, m) = planted_layout(100, 30, &[]);
        assert!(probe_mislabels(&e, &m, &ProbeConfig::default())
            .unwrap()
            .flagged
            .is_empty());
    }

    #[test]
    fn zero_threshold_flags_every_target() {
        let (e, m) = planted_layout(60, 20, &[3]);
        let cfg = ProbeConfig {
            vote_threshold: 0.0,
            ..Default::default()
        };
        let r = probe_mislabels(&e, &m, &cfg).unwrap();
        assert_eq!(r.flagged.len(), 60);
        assert!(r
            .flagged
            .windows(2)
            .all(|w| w[0].seed_vote_fraction >= w[1].seed_vote_fraction));
    }

    #[test]
    fn monotone_in_threshold() {
        let (e, m) = planted_layout(80, 20, &[1, 2, 3]);
        let count = |t: f64| {
            let cfg = ProbeConfig {
                vote_threshold: t,
                k_vote: 15,
                ..Default::default()
            };
            probe_mislabels(&e, &m, &cfg).unwrap().flagged.len()
        };
        let counts: Vec<usize> = (0..=10).map(|i| count(i as f64 / 10.0)).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn parameter_errors() {
        let (e, m) = planted_layout(10, 5, &[]);
        let big_k = ProbeConfig {
            k_vote: 15,
            ..Default::default()
        };
        assert!(matches!(probe_mislabels(&e, &m, &big_k), Err(Error::Parameter(_))));
        let no_seeds = DatasetManifest::from_ids(&m.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), "x");
        assert!(probe_mislabels(&e, &no_seeds, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn empty_target_rejected() {
        let seeds = crate::fixtures::gaussian_blobs(&[crate::fixtures::BlobSpec::new(5, 0.0)], 4, 1).dataset();
        let empty = Dataset::unlabeled(crate::feature_store::FeatureMatrix::empty(4), "t");
        let err = run_seed_probe(&empty, &seeds, &EmbedConfig::default(), &ProbeConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "merge", .. }));
        assert_eq!(err.class(), crate::ErrorClass::Input);
    }
}
