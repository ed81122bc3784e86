//! Fuzzy topological representation of a kNN graph.
//!
//! Each point gets a local offset `rho` (distance to its nearest non-identical
//! neighbor) and a bandwidth `sigma` chosen so that
//! `sum_j exp(-max(0, d_ij - rho_i) / sigma_i) == log2(k)`. Directed
//! membership strengths follow from the same kernel and are symmetrized with
//! the probabilistic t-conorm `a + b - a*b`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::neighbor_graph::NeighborGraph;

/// Relative bracket for the bandwidth search, in units of the row's mean distance.
pub const SIGMA_MIN_FACTOR: f64 = 1e-3;
pub const SIGMA_MAX_FACTOR: f64 = 1e3;
pub const CALIBRATION_TOL: f64 = 1e-5;
pub const CALIBRATION_MAX_ITERS: usize = 64;
/// Floor on the mean row distance so all-zero rows still get a positive sigma.
const MEAN_DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Rows whose target sum has no root inside the bracket; their sigma is
    /// pinned to the nearer bound.
    pub clamped: Vec<bool>,
}

/// Sum of the smoothed kernel over one row.
pub fn kernel_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances.iter().map(|&d| kernel(d, rho, sigma)).sum()
}

#[inline]
fn kernel(d: f64, rho: f64, sigma: f64) -> f64 {
    let excess = d - rho;
    if excess <= 0.0 {
        1.0
    } else {
        (-excess / sigma).exp()
    }
}

/// `(rho, sigma, clamped)` for one row of neighbor distances.
pub fn calibrate_row(distances: &[f64], target: f64) -> (f64, f64, bool) {
    let rho = distances.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let mean = (distances.iter().sum::<f64>() / distances.len().max(1) as f64).max(MEAN_DISTANCE_FLOOR);
    let (mut lo, mut hi) = (SIGMA_MIN_FACTOR * mean, SIGMA_MAX_FACTOR * mean);
    let sigma_min = lo;
    let sigma_max = hi;

    if kernel_sum(distances, rho, lo) >= target {
        let exact = (kernel_sum(distances, rho, lo) - target).abs() < CALIBRATION_TOL;
        return (rho, sigma_min, !exact);
    }
    if kernel_sum(distances, rho, hi) <= target {
        let exact = (kernel_sum(distances, rho, hi) - target).abs() < CALIBRATION_TOL;
        return (rho, sigma_max, !exact);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..CALIBRATION_MAX_ITERS {
        mid = 0.5 * (lo + hi);
        let s = kernel_sum(distances, rho, mid);
        if (s - target).abs() < CALIBRATION_TOL {
            break;
        }
        if s > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (rho, mid, false)
}

pub fn calibrate_smooth_knn(g: &NeighborGraph) -> Calibration {
    let target = (g.k() as f64).log2();
    let rows: Vec<(f64, f64, bool)> = (0..g.n())
        .into_par_iter()
        .map(|i| calibrate_row(g.distances(i), target))
        .collect();
    let mut c = Calibration {
        rho: Vec::with_capacity(rows.len()),
        sigma: Vec::with_capacity(rows.len()),
        clamped: Vec::with_capacity(rows.len()),
    };
    for (rho, sigma, clamped) in rows {
        c.rho.push(rho);
        c.sigma.push(sigma);
        c.clamped.push(clamped);
    }
    let n_clamped = c.clamped.iter().filter(|&&b| b).count();
    if n_clamped > 0 {
        log::debug!("{n_clamped} of {} rows clamped during calibration", g.n());
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

/// Sparse weighted graph with weights in `(0, 1]` and no self-edges.
///
/// A symmetric graph stores both `(i, j)` and `(j, i)`, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    n: usize,
    edges: Vec<Edge>,
    symmetric: bool,
}

impl FuzzyGraph {
    /// Builds a directed graph from raw edges, dropping non-positive weights
    /// and self-edges and clamping weights to at most 1.
    pub fn directed(n: usize, edges: impl IntoIterator<Item = Edge>) -> Self {
        let edges = edges
            .into_iter()
            .filter(|e| e.i != e.j && e.weight > 0.0 && (e.i as usize) < n && (e.j as usize) < n)
            .map(|e| Edge {
                weight: e.weight.min(1.0),
                ..e
            })
            .collect();
        FuzzyGraph {
            n,
            edges,
            symmetric: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges
            .iter()
            .find(|e| e.i as usize == i && e.j as usize == j)
            .map_or(0.0, |e| e.weight)
    }

    /// Compressed adjacency: `(offsets, neighbors, weights)` over outgoing edges.
    pub fn adjacency(&self) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
        let mut offsets = vec![0usize; self.n + 1];
        for e in &self.edges {
            offsets[e.i as usize + 1] += 1;
        }
        for i in 0..self.n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut nbrs = vec![0u32; self.edges.len()];
        let mut weights = vec![0f64; self.edges.len()];
        for e in &self.edges {
            let slot = &mut cursor[e.i as usize];
            nbrs[*slot] = e.j;
            weights[*slot] = e.weight;
            *slot += 1;
        }
        (offsets, nbrs, weights)
    }
}

/// Directed strengths `exp(-max(0, d_ij - rho_i) / sigma_i)` on every kNN edge.
pub fn membership_strengths(g: &NeighborGraph, c: &Calibration) -> FuzzyGraph {
    let mut edges = Vec::with_capacity(g.n() * g.k());
    for i in 0..g.n() {
        for (&j, &d) in g.neighbors(i).iter().zip(g.distances(i)) {
            edges.push(Edge {
                i: i as u32,
                j,
                weight: kernel(d, c.rho[i], c.sigma[i]),
            });
        }
    }
    FuzzyGraph::directed(g.n(), edges)
}

/// Probabilistic t-conorm symmetrization: `w_ij + w_ji - w_ij * w_ji`.
pub fn fuzzy_union(directed: &FuzzyGraph) -> FuzzyGraph {
    let mut pairs: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
    for e in &directed.edges {
        let key = (e.i.min(e.j), e.i.max(e.j));
        let slot = pairs.entry(key).or_insert((0.0, 0.0));
        // Duplicate directed edges keep the strongest weight.
        if e.i < e.j {
            slot.0 = slot.0.max(e.weight);
        } else {
            slot.1 = slot.1.max(e.weight);
        }
    }
    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for ((a, b), (w_ab, w_ba)) in pairs {
        let w = (w_ab + w_ba - w_ab * w_ba).min(1.0);
        if w > 0.0 {
            edges.push(Edge { i: a, j: b, weight: w });
            edges.push(Edge { i: b, j: a, weight: w });
        }
    }
    edges.sort_unstable_by_key(|e| (e.i, e.j));
    FuzzyGraph {
        n: directed.n,
        edges,
        symmetric: true,
    }
}

/// Calibrate, weight and symmetrize a kNN graph in one pass.
pub fn fuzzy_simplicial_set(g: &NeighborGraph) -> (FuzzyGraph, Calibration) {
    let c = calibrate_smooth_knn(g);
    let directed = membership_strengths(g, &c);
    (fuzzy_union(&directed), c)
}

/// Component label per point, numbered by each component's lowest point index.
pub fn connected_components(fg: &FuzzyGraph) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..fg.n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &fg.edges {
        let a = find(&mut parent, e.i as usize);
        let b = find(&mut parent, e.j as usize);
        if a != b {
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
        }
    }
    let mut label_of_root = vec![usize::MAX; fg.n];
    let mut next = 0;
    (0..fg.n)
        .map(|i| {
            let r = find(&mut parent, i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbor_graph::Metric;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain bisection on sigma over a wide fixed bracket, to 1e-10.
    fn bisect_oracle(distances: &[f64], rho: f64, target: f64) -> f64 {
        let f = |s: f64| -> f64 { distances.iter().map(|&d| (-(d - rho).max(0.0) / s).exp()).sum::<f64>() - target };
        let (mut lo, mut hi) = (1e-9, 1e9);
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn graph_row(distances: &[f64]) -> NeighborGraph {
        // One calibrated row plus filler rows, so `k` matches the row length.
        let k = distances.len();
        let n = k + 1;
        let mut idx = Vec::new();
        let mut dist = Vec::new();
        for i in 0..n {
            let others: Vec<u32> = (0..n as u32).filter(|&j| j != i as u32).collect();
            idx.extend(others);
            dist.extend_from_slice(distances);
        }
        NeighborGraph::from_parts(n, k, Metric::Euclidean, idx, dist).unwrap()
    }

    #[test]
    fn equal_distances_clamp_to_sigma_min() {
        let d = 2.5;
        let (rho, sigma, clamped) = calibrate_row(&[d; 4], 2.0);
        assert_eq!(rho, d);
        assert_eq!(sigma, SIGMA_MIN_FACTOR * d);
        assert!(clamped);
        let g = graph_row(&[d; 4]);
        let c = calibrate_smooth_knn(&g);
        let fg = membership_strengths(&g, &c);
        assert!(fg.edges().iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn bisection_matches_oracle() {
        let row = [1.0, 2.0, 3.0, 5.0];
        let (rho, sigma, clamped) = calibrate_row(&row, 2.0);
        assert_eq!(rho, 1.0);
        assert!(!clamped);
        let oracle = bisect_oracle(&row, 1.0, 2.0);
        // Residual tolerance 1e-5 on the sum bounds the sigma error.
        assert!((sigma - oracle).abs() < 1e-4, "{sigma} vs {oracle}");
        let lhs = 1.0 + (-1.0 / sigma).exp() + (-2.0 / sigma).exp() + (-4.0 / sigma).exp();
        assert!((lhs - 2.0).abs() < 1e-5);
    }

    #[test]
    fn rho_skips_zero_distances() {
        let (rho, _, _) = calibrate_row(&[0.0, 2.0, 4.0], 3f64.log2());
        assert_eq!(rho, 2.0);
    }

    #[test]
    fn all_zero_row_is_degenerate_but_finite() {
        let (rho, sigma, clamped) = calibrate_row(&[0.0; 5], 5f64.log2());
        assert_eq!(rho, 0.0);
        assert!(sigma > 0.0);
        assert!(clamped);
        assert_eq!(kernel(0.0, rho, sigma), 1.0);
    }

    #[test]
    fn strengths_at_rho_and_rho_plus_sigma() {
        assert_eq!(kernel(3.0, 3.0, 0.7), 1.0);
        assert!((kernel(3.7, 3.0, 0.7) - (-1f64).exp()).abs() < 1e-12);
        assert!((kernel(3.7, 3.0, 0.7) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn strengths_match_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f32> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = crate::feature_store::FeatureMatrix::new(2, pts, (0..5).map(|i| i.to_string()).collect()).unwrap();
        let g = crate::neighbor_graph::knn_exact(&m, 3, Metric::Euclidean).unwrap();
        let c = calibrate_smooth_knn(&g);
        let fg = membership_strengths(&g, &c);
        assert_eq!(fg.edges().len(), 15);
        for e in fg.edges() {
            let i = e.i as usize;
            let slot = g.neighbors(i).iter().position(|&j| j == e.j).unwrap();
            let d = g.distances(i)[slot];
            let expected = (-(d - c.rho[i]).max(0.0) / c.sigma[i]).exp();
            assert!((e.weight - expected).abs() < 1e-15);
        }
        // Nearest nonzero neighbor always gets full strength.
        for i in 0..5 {
            assert_eq!(fg.weight(i, g.neighbors(i)[0] as usize), 1.0);
        }
    }

    fn edge(i: u32, j: u32, weight: f64) -> Edge {
        Edge { i, j, weight }
    }

    #[test]
    fn union_values() {
        let u = fuzzy_union(&FuzzyGraph::directed(2, [edge(0, 1, 1.0)]));
        assert_eq!(u.weight(0, 1), 1.0);
        assert_eq!(u.weight(1, 0), 1.0);
        let u = fuzzy_union(&FuzzyGraph::directed(2, [edge(0, 1, 1.0), edge(1, 0, 1.0)]));
        assert_eq!(u.weight(0, 1), 1.0);
        let u = fuzzy_union(&FuzzyGraph::directed(2, [edge(0, 1, 0.5), edge(1, 0, 0.5)]));
        assert_eq!(u.weight(0, 1), 0.75);
        assert!(u.is_symmetric());
    }

    #[test]
    fn union_applied_twice_is_not_idempotent() {
        let once = fuzzy_union(&FuzzyGraph::directed(2, [edge(0, 1, 0.3), edge(1, 0, 0.3)]));
        let w = once.weight(0, 1);
        let twice = fuzzy_union(&once);
        assert!((twice.weight(0, 1) - (2.0 * w - w * w)).abs() < 1e-15);
    }

    #[test]
    fn components_of_two_triangles() {
        let tri = |o: u32| [edge(o, o + 1, 1.0), edge(o + 1, o + 2, 1.0), edge(o + 2, o, 1.0)];
        let fg = fuzzy_union(&FuzzyGraph::directed(6, tri(0).into_iter().chain(tri(3))));
        assert_eq!(connected_components(&fg), vec![0, 0, 0, 1, 1, 1]);

        let full: Vec<Edge> = (0..5u32)
            .flat_map(|i| (0..5u32).filter(move |&j| j != i).map(move |j| edge(i, j, 0.5)))
            .collect();
        let fg = fuzzy_union(&FuzzyGraph::directed(5, full));
        assert!(connected_components(&fg).iter().all(|&l| l == 0));
    }

    fn bfs_labels(n: usize, edges: &[Edge]) -> Vec<usize> {
        let mut adj = vec![Vec::new(); n];
        for e in edges {
            adj[e.i as usize].push(e.j as usize);
            adj[e.j as usize].push(e.i as usize);
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([s]);
            label[s] = next;
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    #[test]
    fn components_match_bfs_on_random_sparse_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = 80;
            let edges: Vec<Edge> = (0..60)
                .map(|_| edge(rng.random_range(0..n as u32), rng.random_range(0..n as u32), 0.5))
                .collect();
            let fg = fuzzy_union(&FuzzyGraph::directed(n, edges.clone()));
            assert_eq!(connected_components(&fg), bfs_labels(n, fg.edges()));
        }
    }

    proptest! {
        #[test]
        fn calibration_residual_small(
            mut row in proptest::collection::vec(0.01f64..50.0, 3..40)
        ) {
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let target = (row.len() as f64).log2();
            let (rho, sigma, clamped) = calibrate_row(&row, target);
            if !clamped {
                prop_assert!((kernel_sum(&row, rho, sigma) - target).abs() < CALIBRATION_TOL);
            }
            prop_assert!(sigma > 0.0);
        }

        #[test]
        fn weights_scale_invariant(
            mut row in proptest::collection::vec(0.1f64..10.0, 4..20),
            scale in 0.01f64..100.0,
        ) {
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let target = (row.len() as f64).log2();
            let (rho, sigma, _) = calibrate_row(&row, target);
            let scaled: Vec<f64> = row.iter().map(|d| d * scale).collect();
            let (rho_s, sigma_s, _) = calibrate_row(&scaled, target);
            prop_assert!((rho_s - scale * rho).abs() <= 1e-9 * scale * rho.max(1.0));
            prop_assert!((sigma_s - scale * sigma).abs() <= 1e-3 * scale * sigma);
            for (&d, &ds) in row.iter().zip(&scaled) {
                prop_assert!((kernel(d, rho, sigma) - kernel(ds, rho_s, sigma_s)).abs() < 1e-4);
            }
        }

        #[test]
        fn union_symmetric_and_bounded(
            raw in proptest::collection::vec((0u32..12, 0u32..12, 0.001f64..1.0), 0..60)
        ) {
            let g = FuzzyGraph::directed(12, raw.into_iter().map(|(i, j, w)| edge(i, j, w)));
            let u = fuzzy_union(&g);
            for e in u.edges() {
                prop_assert!(e.weight > 0.0 && e.weight <= 1.0);
                prop_assert_eq!(u.weight(e.j as usize, e.i as usize), e.weight);
            }
        }
    }
}
