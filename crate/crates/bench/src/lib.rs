//! Shared inputs for the benchmarks.

use curate_core::fixtures::{gaussian_blobs, BlobSpec};
use curate_core::{Embedding, FeatureMatrix};

/// `n` points in `dims` dimensions spread over five blobs.
pub fn features(n: usize, dims: usize) -> FeatureMatrix {
    let specs: Vec<BlobSpec> = (0..5).map(|i| BlobSpec::new(n / 5, 8.0 * i as f64)).collect();
    gaussian_blobs(&specs, dims, 17).features
}

/// A 2-D layout with one large cluster and a few small far ones.
pub fn layout(n: usize) -> Embedding {
    let sats = [n / 100, n / 80, n / 60];
    let main = n - sats.iter().sum::<usize>();
    let mut specs = vec![BlobSpec::new(main, 0.0)];
    specs.extend(sats.iter().map(|&s| BlobSpec::new(s, 30.0).std(0.5)));
    let data = gaussian_blobs(&specs, 2, 5);
    let coords = data.features.rows().map(|r| [r[0], r[1]]).collect();
    Embedding::new(coords, "bench", "", 0).expect("finite")
}

#[cfg(test)]
mod tests {
    #[test]
    fn shapes() {
        assert_eq!(super::features(100, 8).n_samples(), 100);
        assert_eq!(super::layout(1000).len(), 1000);
    }
}
