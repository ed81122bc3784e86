//! Seeded synthetic datasets with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::feature_store::{Dataset, DatasetManifest, FeatureMatrix, ManifestEntry};

#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub n: usize,
    /// Distance of the blob center from the origin, along a random direction.
    pub offset: f64,
    pub std: f64,
    pub label: Option<String>,
}

impl BlobSpec {
    pub fn new(n: usize, offset: f64) -> Self {
        BlobSpec {
            n,
            offset,
            std: 1.0,
            label: None,
        }
    }

    pub fn std(mut self, std: f64) -> Self {
        self.std = std;
        self
    }

    pub fn label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

pub struct Synthetic {
    pub features: FeatureMatrix,
    pub manifest: DatasetManifest,
    /// Index into the spec list for every row.
    pub blob: Vec<usize>,
}

impl Synthetic {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(self.features.clone(), self.manifest.clone()).expect("aligned by construction")
    }
}

fn unit_vector(rng: &mut impl Rng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Isotropic Gaussian blobs. Row ids are `s00000`, `s00001`, ...; the view
/// label is the spec label or `blob{i}`.
pub fn gaussian_blobs(specs: &[BlobSpec], dims: usize, seed: u64) -> Synthetic {
    gaussian_blobs_with_prefix(specs, dims, seed, "s", "synthetic")
}

pub fn gaussian_blobs_with_prefix(
    specs: &[BlobSpec],
    dims: usize,
    seed: u64,
    id_prefix: &str,
    source: &str,
) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| unit_vector(&mut rng, dims).into_iter().map(|x| x * s.offset).collect())
        .collect();
    let mut values = Vec::new();
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (b, (spec, center)) in specs.iter().zip(&centers).enumerate() {
        let normal = Normal::new(0.0, spec.std).expect("finite std");
        let label = spec.label.clone().unwrap_or_else(|| format!("blob{b}"));
        for _ in 0..spec.n {
            values.extend(center.iter().map(|c| (c + normal.sample(&mut rng)) as f32));
            let id = format!("{id_prefix}{:05}", entries.len());
            entries.push(ManifestEntry {
                view_label: Some(label.clone()),
                ..ManifestEntry::bare(id, source)
            });
            blob.push(b);
        }
    }
    let ids = entries.iter().map(|e| e.id.clone()).collect();
    Synthetic {
        features: FeatureMatrix::new(dims, values, ids).expect("finite by construction"),
        manifest: DatasetManifest::new(entries).expect("unique ids"),
        blob,
    }
}

/// One large blob plus small satellites far from it.
pub fn planted_satellites(main: usize, satellites: &[usize], dims: usize, seed: u64) -> Synthetic {
    let mut specs = vec![BlobSpec::new(main, 0.0).label("main")];
    specs.extend(
        satellites
            .iter()
            .enumerate()
            .map(|(i, &n)| BlobSpec::new(n, 25.0).label(format!("satellite{i}"))),
    );
    gaussian_blobs(&specs, dims, seed)
}

pub struct MislabelFixture {
    pub target: Dataset,
    pub seeds: Dataset,
    /// Target ids whose features come from the seed class.
    pub planted: Vec<String>,
}

/// Target set of `n_target` points labeled B, `n_planted` of which are drawn
/// from class A; `n_seeds` seeds drawn from class A from a different source.
pub fn mislabel_fixture(n_target: usize, n_planted: usize, n_seeds: usize, dims: usize, seed: u64) -> MislabelFixture {
    assert!(n_planted <= n_target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let separation = 12.0;
    let center_a: Vec<f64> = unit_vector(&mut rng, dims)
        .into_iter()
        .map(|x| x * separation / 2.0)
        .collect();
    let center_b: Vec<f64> = center_a.iter().map(|x| -x).collect();
    let draw = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
        center
            .iter()
            .map(|c| (c + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    };

    let mut planted_rows: Vec<usize> = rand::seq::index::sample(&mut rng, n_target, n_planted).into_vec();
    planted_rows.sort_unstable();
    let mut values = Vec::with_capacity(n_target * dims);
    let mut entries = Vec::with_capacity(n_target);
    let mut planted = Vec::new();
    let mut next_planted = planted_rows.iter().peekable();
    for i in 0..n_target {
        let is_planted = next_planted.next_if(|&&r| r == i).is_some();
        let center = if is_planted { &center_a } else { &center_b };
        values.extend(draw(center, &mut rng));
        let id = format!("t{i:05}");
        if is_planted {
            planted.push(id.clone());
        }
        entries.push(ManifestEntry {
            view_label: Some("B".into()),
            ..ManifestEntry::bare(id, "target-set")
        });
    }
    let target = Dataset::new(
        FeatureMatrix::new(dims, values, entries.iter().map(|e| e.id.clone()).collect()).expect("finite"),
        DatasetManifest::new(entries).expect("unique"),
    )
    .expect("aligned");

    let mut values = Vec::with_capacity(n_seeds * dims);
    let mut entries = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        values.extend(draw(&center_a, &mut rng));
        entries.push(ManifestEntry {
            view_label: Some("A".into()),
            ..ManifestEntry::bare(format!("r{i:05}"), "reference-set")
        });
    }
    let seeds = Dataset::new(
        FeatureMatrix::new(dims, values, entries.iter().map(|e| e.id.clone()).collect()).expect("finite"),
        DatasetManifest::new(entries).expect("unique"),
    )
    .expect("aligned");
    MislabelFixture { target, seeds, planted }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded() {
        let a = gaussian_blobs(&[BlobSpec::new(10, 5.0), BlobSpec::new(5, 0.0)], 4, 9);
        let b = gaussian_blobs(&[BlobSpec::new(10, 5.0), BlobSpec::new(5, 0.0)], 4, 9);
        assert_eq!(a.features, b.features);
        assert_eq!(a.blob, [vec![0; 10], vec![1; 5]].concat());
        assert_eq!(a.manifest.entries[12].view_label.as_deref(), Some("blob1"));
    }

    #[test]
    fn mislabel_fixture_shape() {
        let f = mislabel_fixture(200, 7, 30, 8, 1);
        assert_eq!(f.target.len(), 200);
        assert_eq!(f.seeds.len(), 30);
        assert_eq!(f.planted.len(), 7);
        assert!(f
            .target
            .manifest
            .entries
            .iter()
            .all(|e| e.view_label.as_deref() == Some("B")));
    }
}
