use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{config_hash, scale_to_box, Embedding};
use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;
use crate::fuzzy::{connected_components, FuzzyGraph};
use crate::pca::pca_fit;

use super::{InitMethod, UmapConfig};

/// Initial layouts live in `[-INIT_BOX, INIT_BOX]^2`.
pub const INIT_BOX: f64 = 10.0;
const SPECTRAL_TOL: f64 = 1e-9;
/// Cap on power-iteration work, in units of adjacency entries visited.
const SPECTRAL_WORK: usize = 400_000_000;

/// Starting layout for [`optimize_layout`](super::optimize_layout).
///
/// `features` is only consulted for [`InitMethod::Pca`].
pub fn init_embedding(fg: &FuzzyGraph, cfg: &UmapConfig, features: Option<&FeatureMatrix>) -> Result<Embedding> {
    if !fg.is_symmetric() {
        return Err(Error::param("initialization needs a symmetrized graph"));
    }
    let n = fg.n();
    let mut coords = match cfg.init {
        InitMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-INIT_BOX..=INIT_BOX),
                        rng.random_range(-INIT_BOX..=INIT_BOX),
                    ]
                })
                .collect()
        }
        InitMethod::Spectral => spectral_layout(fg, cfg.rng_seed),
        InitMethod::Pca => {
            let m = features.ok_or_else(|| Error::param("pca init needs the feature matrix"))?;
            if m.n_samples() != n {
                return Err(Error::Alignment(format!(
                    "{} feature rows for a graph on {n} points",
                    m.n_samples()
                )));
            }
            let pca = pca_fit(m, 2.min(m.n_dims()))?;
            m.rows()
                .map(|r| {
                    let p = pca.transform_row(r);
                    [p[0], p.get(1).copied().unwrap_or(0.0)]
                })
                .collect()
        }
    };
    scale_to_box(&mut coords, INIT_BOX);
    Embedding::from_f64(&coords, "umap-init", &config_hash(cfg), cfg.rng_seed)
}

/// Laplacian-eigenmap layout. Disconnected graphs are laid out per component
/// and the components are placed on a square grid, largest first.
pub fn spectral_layout(fg: &FuzzyGraph, seed: u64) -> Vec<[f64; 2]> {
    let n = fg.n();
    let labels = connected_components(fg);
    let n_comp = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (offsets, nbrs, weights) = fg.adjacency();

    if n_comp <= 1 {
        let nodes: Vec<usize> = (0..n).collect();
        let mut coords = component_layout(&nodes, &offsets, &nbrs, &weights, seed);
        normalize_unit(&mut coords);
        return coords;
    }

    log::warn!("graph has {n_comp} connected components; laying them out on a grid");
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut order: Vec<usize> = (0..n_comp).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(members[c].len()), c));

    let side = (n_comp as f64).sqrt().ceil() as usize;
    let mut coords = vec![[0.0f64; 2]; n];
    for (slot, &c) in order.iter().enumerate() {
        let nodes = &members[c];
        let mut local = component_layout(nodes, &offsets, &nbrs, &weights, seed ^ c as u64);
        normalize_unit(&mut local);
        let center = [
            3.0 * (slot % side) as f64 - 1.5 * (side - 1) as f64,
            3.0 * (slot / side) as f64 - 1.5 * (side - 1) as f64,
        ];
        for (&node, p) in nodes.iter().zip(local) {
            coords[node] = [center[0] + p[0], center[1] + p[1]];
        }
    }
    coords
}

/// Centers a layout and scales it into the unit box.
fn normalize_unit(coords: &mut [[f64; 2]]) {
    if coords.is_empty() {
        return;
    }
    let n = coords.len() as f64;
    let cx = coords.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = coords.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in coords.iter_mut() {
        p[0] -= cx;
        p[1] -= cy;
    }
    scale_to_box(coords, 1.0);
}

/// Two leading nontrivial eigenvectors of `N = D^-1/2 W D^-1/2` on the
/// induced subgraph, by block power iteration on `(I + N) / 2` with the
/// trivial eigenvector `D^1/2 1` deflated. Returned rescaled by `D^-1/2`.
fn component_layout(nodes: &[usize], offsets: &[usize], nbrs: &[u32], weights: &[f64], seed: u64) -> Vec<[f64; 2]> {
    let m = nodes.len();
    match m {
        0 => return Vec::new(),
        1 => return vec![[0.0, 0.0]],
        2 => return vec![[-0.5, 0.0], [0.5, 0.0]],
        _ => {}
    }
    let mut local = std::collections::HashMap::with_capacity(m);
    for (li, &g) in nodes.iter().enumerate() {
        local.insert(g, li);
    }
    // Induced adjacency with local indices.
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for (li, &g) in nodes.iter().enumerate() {
        for e in offsets[g]..offsets[g + 1] {
            if let Some(&lj) = local.get(&(nbrs[e] as usize)) {
                adj[li].push((lj, weights[e]));
            }
        }
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut trivial: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    let tn = trivial.iter().map(|x| x * x).sum::<f64>().sqrt();
    trivial.iter_mut().for_each(|x| *x /= tn);

    let apply = |v: &[f64], out: &mut [f64]| {
        for i in 0..m {
            let mut acc = 0.0;
            for &(j, w) in &adj[i] {
                acc += w * inv_sqrt[j] * v[j];
            }
            out[i] = 0.5 * (v[i] + inv_sqrt[i] * acc);
        }
    };
    let project_out = |v: &mut [f64], u: &[f64]| {
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(x, ui)| *x -= d * ui);
    };
    let norm = |v: &mut [f64]| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v1: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut v2: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let orthonormalize = |v1: &mut Vec<f64>, v2: &mut Vec<f64>| {
        project_out(v1, &trivial);
        norm(v1);
        project_out(v2, &trivial);
        project_out(v2, v1);
        norm(v2);
    };
    orthonormalize(&mut v1, &mut v2);

    let nnz: usize = adj.iter().map(Vec::len).sum::<usize>() + m;
    let max_iters = (SPECTRAL_WORK / (2 * nnz)).clamp(50, 20_000);
    let (mut w1, mut w2) = (vec![0.0; m], vec![0.0; m]);
    for _ in 0..max_iters {
        apply(&v1, &mut w1);
        apply(&v2, &mut w2);
        orthonormalize(&mut w1, &mut w2);
        // Subspace change: residual of the new block against the old span.
        let change = subspace_residual(&w1, &w2, &v1, &v2);
        std::mem::swap(&mut v1, &mut w1);
        std::mem::swap(&mut v2, &mut w2);
        if change < SPECTRAL_TOL {
            break;
        }
    }

    // Rayleigh-Ritz inside the 2-D span to order and align the vectors.
    apply(&v1, &mut w1);
    apply(&v2, &mut w2);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (h11, h12, h22) = (dot(&v1, &w1), dot(&v1, &w2), dot(&v2, &w2));
    let theta = 0.5 * (2.0 * h12).atan2(h11 - h22);
    let (c, s) = (theta.cos(), theta.sin());
    let mut e1: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| c * a + s * b).collect();
    let mut e2: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| -s * a + c * b).collect();
    apply(&e1, &mut w1);
    apply(&e2, &mut w2);
    if dot(&e2, &w2) > dot(&e1, &w1) {
        std::mem::swap(&mut e1, &mut e2);
    }
    for e in [&mut e1, &mut e2] {
        let lead = e
            .iter()
            .copied()
            .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if lead < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
    }
    // Generalized eigenvectors `L f = lambda D f`, i.e. D^-1/2 u.
    (0..m).map(|i| [e1[i] * inv_sqrt[i], e2[i] * inv_sqrt[i]]).collect()
}

fn subspace_residual(w1: &[f64], w2: &[f64], v1: &[f64], v2: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for w in [w1, w2] {
        let a: f64 = w.iter().zip(v1).map(|(x, y)| x * y).sum();
        let b: f64 = w.iter().zip(v2).map(|(x, y)| x * y).sum();
        let r: f64 = w
            .iter()
            .zip(v1.iter().zip(v2))
            .map(|(x, (p, q))| (x - a * p - b * q).powi(2))
            .sum();
        worst = worst.max(r.sqrt());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::{fuzzy_union, Edge};
    use nalgebra::{DMatrix, SymmetricEigen};

    fn path(n: usize) -> FuzzyGraph {
        let edges = (0..n as u32 - 1).map(|i| Edge {
            i,
            j: i + 1,
            weight: 1.0,
        });
        fuzzy_union(&FuzzyGraph::directed(n, edges))
    }

    fn clique(offset: u32, size: u32) -> Vec<Edge> {
        let mut edges = Vec::new();
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    edges.push(Edge {
                        i: offset + i,
                        j: offset + j,
                        weight: 1.0,
                    });
                }
            }
        }
        edges
    }

    #[test]
    fn random_init_is_deterministic() {
        let fg = path(30);
        let cfg = UmapConfig {
            init: InitMethod::Random,
            rng_seed: 9,
            ..Default::default()
        };
        let a = init_embedding(&fg, &cfg, None).unwrap();
        let b = init_embedding(&fg, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.coords().iter().all(|p| p[0].abs() <= 10.0 && p[1].abs() <= 10.0));
    }

    #[test]
    fn disjoint_cliques_get_separate_cells() {
        let mut edges = clique(0, 5);
        edges.extend(clique(5, 5));
        let fg = fuzzy_union(&FuzzyGraph::directed(10, edges));
        let coords = spectral_layout(&fg, 1);
        let centroid = |r: std::ops::Range<usize>| {
            let k = r.len() as f64;
            let (sx, sy) = coords[r].iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
            [sx / k, sy / k]
        };
        let (a, b) = (centroid(0..5), centroid(5..10));
        let gap = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(gap >= 2.9, "component centroids too close: {gap}");
    }

    #[test]
    fn path_second_eigenvector_is_monotone() {
        let n = 40;
        let fg = path(n);
        let coords = spectral_layout(&fg, 3);
        let x: Vec<f64> = coords.iter().map(|p| p[0]).collect();
        let increasing = x.windows(2).all(|w| w[1] > w[0]);
        let decreasing = x.windows(2).all(|w| w[1] < w[0]);
        assert!(increasing || decreasing, "{x:?}");

        // Dense oracle: second eigenvector of D^-1/2 W D^-1/2.
        let mut w = DMatrix::<f64>::zeros(n, n);
        for e in fg.edges() {
            w[(e.i as usize, e.j as usize)] = e.weight;
        }
        let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
        let norm = DMatrix::from_fn(n, n, |i, j| w[(i, j)] / (deg[i] * deg[j]).sqrt());
        let eig = SymmetricEigen::new(norm);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let fiedler: Vec<f64> = eig
            .eigenvectors
            .column(order[1])
            .iter()
            .zip(&deg)
            .map(|(u, d)| u / d.sqrt())
            .collect();
        let fn_norm = fiedler.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xs_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos: f64 = fiedler.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().abs() / (xs_norm * fn_norm);
        assert!(cos > 0.999, "cosine with dense eigenvector {cos}");
    }

    #[test]
    fn pca_init_requires_features() {
        let fg = path(5);
        let cfg = UmapConfig {
            init: InitMethod::Pca,
            ..Default::default()
        };
        assert!(init_embedding(&fg, &cfg, None).is_err());
    }
}
