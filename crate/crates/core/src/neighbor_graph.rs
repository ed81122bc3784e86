//! k-nearest-neighbor graphs over feature rows.
//!
//! [`knn_exact`] is the brute-force reference; [`knn_descent`] is the
//! approximate NN-descent search used once exhaustive search gets expensive.
//! Both break distance ties by the lower row index.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader};
use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;

pub const GRAPH_MAGIC: &[u8; 8] = b"KNNGRPH1";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x as f64, y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 && nb == 0.0 {
                    0.0
                } else if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
                }
            }
        }
    }

    fn tag(self) -> u32 {
        match self {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Metric::Euclidean),
            1 => Ok(Metric::Cosine),
            t => Err(Error::Format(format!("unknown metric tag {t}"))),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::param(format!("unknown metric {other:?}"))),
        }
    }
}

/// Row-major `n x k` neighbor lists, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    metric: Metric,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl NeighborGraph {
    /// Validating constructor: no self-loops, indices in range, distances
    /// finite, non-negative and ascending per row.
    pub fn from_parts(n: usize, k: usize, metric: Metric, indices: Vec<u32>, distances: Vec<f64>) -> Result<Self> {
        if indices.len() != n * k || distances.len() != n * k {
            return Err(Error::Format(format!(
                "neighbor arrays of length {}/{} do not match {n} x {k}",
                indices.len(),
                distances.len()
            )));
        }
        for i in 0..n {
            let row = &indices[i * k..(i + 1) * k];
            let dist = &distances[i * k..(i + 1) * k];
            for (slot, (&j, &d)) in row.iter().zip(dist).enumerate() {
                if j as usize >= n || j as usize == i {
                    return Err(Error::Format(format!("row {i}: invalid neighbor {j}")));
                }
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Format(format!("row {i}: invalid distance {d}")));
                }
                if slot > 0 && dist[slot - 1] > d {
                    return Err(Error::Format(format!("row {i}: distances not ascending")));
                }
            }
        }
        Ok(NeighborGraph {
            n,
            k,
            metric,
            indices,
            distances,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.indices.len() * 8);
        out.extend_from_slice(GRAPH_MAGIC);
        binfmt::put_u32(&mut out, GRAPH_VERSION);
        binfmt::put_u64(&mut out, self.n as u64);
        binfmt::put_u64(&mut out, self.k as u64);
        binfmt::put_u32(&mut out, self.metric.tag());
        for &j in &self.indices {
            binfmt::put_u32(&mut out, j);
        }
        let d32: Vec<f32> = self.distances.iter().map(|&d| d as f32).collect();
        binfmt::put_f32s(&mut out, &d32);
        out
    }

    /// Distances come back rounded to `f32`.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "graph file");
        r.magic(GRAPH_MAGIC)?;
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!("unsupported graph version {version}")));
        }
        let n = r.u64()? as usize;
        let k = r.u64()? as usize;
        let metric = Metric::from_tag(r.u32()?)?;
        let count = n
            .checked_mul(k)
            .ok_or_else(|| Error::Format("graph size overflow".into()))?;
        let indices = r.u32s(count)?;
        let distances = r.f32s(count)?.into_iter().map(f64::from).collect();
        r.finish()?;
        NeighborGraph::from_parts(n, k, metric, indices, distances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binfmt::read_file(path.as_ref())?)
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::param(format!(
            "k must satisfy 1 <= k < n_samples (k = {k}, n_samples = {n})"
        )));
    }
    if n > u32::MAX as usize {
        return Err(Error::param("more than u32::MAX samples"));
    }
    Ok(())
}

/// Exact k nearest neighbors by exhaustive comparison.
pub fn knn_exact(m: &FeatureMatrix, k: usize, metric: Metric) -> Result<NeighborGraph> {
    let n = m.n_samples();
    check_k(n, k)?;
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = m.row(i);
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.distance(xi, m.row(j)), j as u32))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(d, j)| (j, d)).unzip()
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (idx, dist) in rows {
        indices.extend(idx);
        distances.extend(dist);
    }
    Ok(NeighborGraph {
        n,
        k,
        metric,
        indices,
        distances,
    })
}

/// Fixed-size neighbor lists kept sorted by `(distance, index)`.
struct CandidateHeap {
    k: usize,
    idx: Vec<u32>,
    dist: Vec<f64>,
    fresh: Vec<bool>,
}

impl CandidateHeap {
    fn new(n: usize, k: usize) -> Self {
        CandidateHeap {
            k,
            idx: vec![u32::MAX; n * k],
            dist: vec![f64::INFINITY; n * k],
            fresh: vec![false; n * k],
        }
    }

    /// Inserts `j` into row `i` if it beats the current worst entry.
    fn push(&mut self, i: usize, j: u32, d: f64) -> bool {
        if j as usize == i {
            return false;
        }
        let lo = i * self.k;
        let hi = lo + self.k;
        let worse_than = |a: (f64, u32), b: (f64, u32)| a.0 > b.0 || (a.0 == b.0 && a.1 >= b.1);
        if worse_than((d, j), (self.dist[hi - 1], self.idx[hi - 1])) {
            return false;
        }
        if self.idx[lo..hi].contains(&j) {
            return false;
        }
        let mut pos = hi - 1;
        while pos > lo && worse_than((self.dist[pos - 1], self.idx[pos - 1]), (d, j)) {
            self.dist[pos] = self.dist[pos - 1];
            self.idx[pos] = self.idx[pos - 1];
            self.fresh[pos] = self.fresh[pos - 1];
            pos -= 1;
        }
        self.dist[pos] = d;
        self.idx[pos] = j;
        self.fresh[pos] = true;
        true
    }
}

/// Approximate k nearest neighbors by NN-descent.
///
/// Neighbor lists start from a seeded random sample and are refined by
/// comparing each point's neighbors (and reverse neighbors) with each other.
/// Stops after `max_iters` rounds or once a round changes fewer than 0.1% of
/// the `n * k` list entries. All updates are applied in row order on a single
/// thread, so the output depends only on `rng_seed`.
pub fn knn_descent(
    m: &FeatureMatrix,
    k: usize,
    metric: Metric,
    rng_seed: u64,
    max_iters: usize,
) -> Result<NeighborGraph> {
    let n = m.n_samples();
    check_k(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut heap = CandidateHeap::new(n, k);
    let dist = |a: usize, b: usize| metric.distance(m.row(a), m.row(b));

    for i in 0..n {
        for s in rand::seq::index::sample(&mut rng, n - 1, k) {
            let j = if s >= i { s + 1 } else { s };
            heap.push(i, j as u32, dist(i, j));
        }
    }

    let threshold = 0.001 * (n * k) as f64;
    let max_candidates = k.max(4);
    for _ in 0..max_iters {
        let mut new_cand: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut old_cand: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for slot in i * k..(i + 1) * k {
                let j = heap.idx[slot];
                if heap.fresh[slot] {
                    new_cand[i].push(j);
                    new_cand[j as usize].push(i as u32);
                    heap.fresh[slot] = false;
                } else {
                    old_cand[i].push(j);
                    old_cand[j as usize].push(i as u32);
                }
            }
        }
        for list in new_cand.iter_mut().chain(old_cand.iter_mut()) {
            list.sort_unstable();
            list.dedup();
            if list.len() > max_candidates {
                list.shuffle(&mut rng);
                list.truncate(max_candidates);
                list.sort_unstable();
            }
        }

        let mut updates = 0usize;
        for i in 0..n {
            let news = &new_cand[i];
            let olds = &old_cand[i];
            for (ai, &a) in news.iter().enumerate() {
                for &b in &news[ai + 1..] {
                    let d = dist(a as usize, b as usize);
                    updates += heap.push(a as usize, b, d) as usize;
                    updates += heap.push(b as usize, a, d) as usize;
                }
                for &b in olds {
                    if a == b {
                        continue;
                    }
                    let d = dist(a as usize, b as usize);
                    updates += heap.push(a as usize, b, d) as usize;
                    updates += heap.push(b as usize, a, d) as usize;
                }
            }
        }
        log::debug!("nn-descent round: {updates} updates");
        if (updates as f64) < threshold {
            break;
        }
    }

    debug_assert!(heap.idx.iter().all(|&j| j != u32::MAX));
    Ok(NeighborGraph {
        n,
        k,
        metric,
        indices: heap.idx,
        distances: heap.dist,
    })
}

/// Mean fraction of each row's exact neighbors that `approx` also found.
pub fn knn_recall(approx: &NeighborGraph, exact: &NeighborGraph) -> Result<f64> {
    if approx.n != exact.n || approx.k != exact.k {
        return Err(Error::param(format!(
            "graph shapes differ: {} x {} vs {} x {}",
            approx.n, approx.k, exact.n, exact.k
        )));
    }
    let total: usize = (0..approx.n)
        .map(|i| {
            let truth = exact.neighbors(i);
            approx.neighbors(i).iter().filter(|j| truth.contains(j)).count()
        })
        .sum();
    Ok(total as f64 / (approx.n * approx.k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn line(points: &[f32]) -> FeatureMatrix {
        FeatureMatrix::new(1, points.to_vec(), (0..points.len()).map(|i| i.to_string()).collect()).unwrap()
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let values = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        FeatureMatrix::new(d, values, (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    /// Full pairwise sort, no partial selection.
    fn brute_force(m: &FeatureMatrix, k: usize) -> Vec<Vec<u32>> {
        let n = m.n_samples();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d2: f64 = m
                            .row(i)
                            .iter()
                            .zip(m.row(j))
                            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                            .sum();
                        (d2.sqrt(), j)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.iter().take(k).map(|&(_, j)| j as u32).collect()
            })
            .collect()
    }

    #[test]
    fn line_nearest_neighbors() {
        let g = knn_exact(&line(&[0.0, 1.0, 3.0, 7.0]), 1, Metric::Euclidean).unwrap();
        let nn: Vec<u32> = (0..4).map(|i| g.neighbors(i)[0]).collect();
        assert_eq!(nn, vec![1, 0, 1, 2]);
        assert_eq!(g.distances(3), &[4.0]);
    }

    #[test]
    fn k_equal_n_minus_one_lists_everyone() {
        let m = gaussian(12, 3, 5);
        let g = knn_exact(&m, 11, Metric::Euclidean).unwrap();
        for i in 0..12 {
            let mut row = g.neighbors(i).to_vec();
            row.sort_unstable();
            let expected: Vec<u32> = (0..12).filter(|&j| j != i as u32).collect();
            assert_eq!(row, expected);
        }
    }

    #[test]
    fn exact_matches_sort_oracle() {
        let m = gaussian(200, 16, 11);
        let g = knn_exact(&m, 10, Metric::Euclidean).unwrap();
        let oracle = brute_force(&m, 10);
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(g.neighbors(i), row.as_slice(), "row {i}");
        }
    }

    #[test]
    fn bad_k_rejected() {
        let m = gaussian(5, 2, 1);
        assert!(matches!(knn_exact(&m, 5, Metric::Euclidean), Err(Error::Parameter(_))));
        assert!(matches!(knn_exact(&m, 0, Metric::Euclidean), Err(Error::Parameter(_))));
        assert!(matches!(
            knn_descent(&m, 7, Metric::Euclidean, 0, 10),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn duplicates_come_first_with_zero_distance() {
        let m = line(&[5.0, 1.0, 5.0, 9.0]);
        let g = knn_exact(&m, 2, Metric::Euclidean).unwrap();
        assert_eq!(g.neighbors(0)[0], 2);
        assert_eq!(g.distances(0)[0], 0.0);
        assert_eq!(g.neighbors(2)[0], 0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let m = line(&[0.0, -1.0, 1.0]);
        let g = knn_exact(&m, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
    }

    #[test]
    fn cosine_distance_basics() {
        assert!(Metric::Cosine.distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-12);
        assert!((Metric::Cosine.distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!((Metric::Cosine.distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn descent_recall_small() {
        let m = gaussian(50, 8, 3);
        let exact = knn_exact(&m, 5, Metric::Euclidean).unwrap();
        let approx = knn_descent(&m, 5, Metric::Euclidean, 42, 20).unwrap();
        assert!(knn_recall(&approx, &exact).unwrap() >= 0.95);
    }

    #[test]
    fn descent_full_k_is_exact() {
        let m = gaussian(20, 4, 9);
        let exact = knn_exact(&m, 19, Metric::Euclidean).unwrap();
        let approx = knn_descent(&m, 19, Metric::Euclidean, 1, 5).unwrap();
        assert_eq!(knn_recall(&approx, &exact).unwrap(), 1.0);
    }

    #[test]
    fn descent_is_seed_deterministic() {
        let m = gaussian(300, 6, 4);
        let a = knn_descent(&m, 8, Metric::Euclidean, 77, 10).unwrap();
        let b = knn_descent(&m, 8, Metric::Euclidean, 77, 10).unwrap();
        assert_eq!(a, b);
        // Output satisfies the graph invariants.
        NeighborGraph::from_parts(a.n, a.k, a.metric, a.indices.clone(), a.distances.clone()).unwrap();
    }

    #[test]
    fn recall_edge_cases() {
        let a = NeighborGraph::from_parts(4, 1, Metric::Euclidean, vec![1, 0, 3, 2], vec![1.0; 4]).unwrap();
        let b = NeighborGraph::from_parts(4, 1, Metric::Euclidean, vec![1, 0, 0, 0], vec![1.0; 4]).unwrap();
        let c = NeighborGraph::from_parts(4, 1, Metric::Euclidean, vec![2, 2, 0, 0], vec![1.0; 4]).unwrap();
        assert_eq!(knn_recall(&a, &a).unwrap(), 1.0);
        assert_eq!(knn_recall(&b, &a).unwrap(), 0.5);
        assert_eq!(knn_recall(&c, &a).unwrap(), 0.0);
        let short = NeighborGraph::from_parts(2, 1, Metric::Euclidean, vec![1, 0], vec![1.0; 2]).unwrap();
        assert!(knn_recall(&short, &a).is_err());
    }

    #[test]
    fn graph_file_round_trip() {
        let m = gaussian(30, 4, 2);
        let g = knn_exact(&m, 4, Metric::Cosine).unwrap();
        let back = NeighborGraph::from_bytes(&g.to_bytes()).unwrap();
        assert_eq!(back.indices, g.indices);
        assert_eq!(back.metric(), Metric::Cosine);
        for (a, b) in back.distances.iter().zip(&g.distances) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
