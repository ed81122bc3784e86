//! Principal component projection.
//!
//! The covariance matrix is formed explicitly and its leading eigenvectors
//! are found one at a time by power iteration with deflation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::{config_hash, Embedding};
use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;

const POWER_MAX_ITERS: usize = 200_000;
const POWER_TOL: f64 = 1e-14;
/// Eigenvalues below this fraction of the total variance count as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, descending by variance. Zero vectors mark
    /// components beyond the data's rank.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn transform_row(&self, row: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(row.iter().zip(&self.mean))
                    .map(|(ci, (&x, mu))| ci * (x as f64 - mu))
                    .sum()
            })
            .collect()
    }
}

/// Sample covariance (`n - 1` denominator) of the rows of `m`.
pub fn covariance(m: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (m.n_samples(), m.n_dims());
    let mut mean = vec![0.0f64; d];
    for row in m.rows() {
        for (mu, &x) in mean.iter_mut().zip(row) {
            *mu += x as f64;
        }
    }
    for mu in &mut mean {
        *mu /= n as f64;
    }
    let denom = (n.max(2) - 1) as f64;
    // Upper triangle by row of the covariance, filled in parallel.
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|a| {
            let mut acc = vec![0.0f64; d - a];
            for row in m.rows() {
                let xa = row[a] as f64 - mean[a];
                if xa == 0.0 {
                    continue;
                }
                for (slot, b) in (a..d).enumerate() {
                    acc[slot] += xa * (row[b] as f64 - mean[b]);
                }
            }
            acc.iter_mut().for_each(|v| *v /= denom);
            acc
        })
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for (a, row) in upper.iter().enumerate() {
        for (slot, &v) in row.iter().enumerate() {
            let b = a + slot;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

fn matvec(mat: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for (a, o) in out.iter_mut().enumerate() {
        *o = mat[a * d..(a + 1) * d].iter().zip(v).map(|(m, x)| m * x).sum();
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let lead = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading `dims` eigenpairs of a symmetric PSD matrix.
pub(crate) fn top_eigenpairs(mat: &[f64], d: usize, dims: usize) -> Vec<(f64, Vec<f64>)> {
    let trace: f64 = (0..d).map(|a| mat[a * d + a]).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(dims);
    let mut tmp = vec![0.0f64; d];
    for _ in 0..dims {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let deflate = |v: &mut Vec<f64>, found: &[(f64, Vec<f64>)]| {
            for (_, u) in found {
                let proj: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= proj * ui);
            }
        };
        deflate(&mut v, &found);
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            matvec(mat, d, &v, &mut tmp);
            deflate(&mut tmp, &found);
            lambda = normalize(&mut tmp);
            if lambda <= RANK_TOL * trace.max(f64::MIN_POSITIVE) {
                lambda = 0.0;
                break;
            }
            // Power iteration on a PSD matrix converges without sign flips.
            let delta: f64 = tmp.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut v, &mut tmp);
            if delta < POWER_TOL {
                break;
            }
        }
        if lambda == 0.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
        } else {
            // Rayleigh quotient is more accurate than the last norm.
            matvec(mat, d, &v, &mut tmp);
            lambda = v.iter().zip(&tmp).map(|(a, b)| a * b).sum();
            fix_sign(&mut v);
        }
        found.push((lambda, v));
    }
    found
}

pub fn pca_fit(m: &FeatureMatrix, dims: usize) -> Result<Pca> {
    if dims == 0 || dims > m.n_dims() {
        return Err(Error::param(format!(
            "PCA needs 1 <= dims <= n_dims (dims = {dims}, n_dims = {})",
            m.n_dims()
        )));
    }
    let d = m.n_dims();
    let (mean, cov) = covariance(m);
    let pairs = top_eigenpairs(&cov, d, dims);
    let zeroed = pairs.iter().filter(|(l, _)| *l == 0.0).count();
    if zeroed > 0 {
        log::warn!("data rank is below {dims}; {zeroed} principal component(s) zero-filled");
    }
    let (explained_variance, components) = pairs.into_iter().unzip();
    Ok(Pca {
        mean,
        components,
        explained_variance,
    })
}

#[derive(Serialize)]
struct PcaHashInput {
    method: &'static str,
    dims: usize,
}

/// Mean-centered projection onto the top two principal directions.
pub fn pca_project(m: &FeatureMatrix) -> Result<Embedding> {
    let pca = pca_fit(m, 2)?;
    let coords: Vec<[f64; 2]> = m
        .rows()
        .map(|r| {
            let p = pca.transform_row(r);
            [p[0], p[1]]
        })
        .collect();
    let hash = config_hash(&PcaHashInput { method: "pca", dims: 2 });
    Embedding::from_f64(&coords, "pca", &hash, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand_distr::{Distribution, Normal};

    fn matrix(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, (0..rows.len()).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn collinear_points() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32, 2.0 * i as f32]).collect();
        let pca = pca_fit(&matrix(&rows), 2).unwrap();
        let s5 = 5f64.sqrt();
        let c = &pca.components[0];
        assert!((c[0].abs() - 1.0 / s5).abs() < 1e-9 && (c[1].abs() - 2.0 / s5).abs() < 1e-9);
        assert!(pca.explained_variance[1].abs() < 1e-9);
        assert!(pca.components[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isotropic_variances_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let rows: Vec<Vec<f32>> = (0..20000)
            .map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let pca = pca_fit(&matrix(&rows), 2).unwrap();
        let ratio = pca.explained_variance[1] / pca.explained_variance[0];
        assert!(ratio > 0.95, "{:?}", pca.explained_variance);
    }

    #[test]
    fn matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let m = matrix(&rows);
        let pca = pca_fit(&m, 2).unwrap();
        let (_, cov) = covariance(&m);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(8, 8, &cov));
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        for (c, &idx) in pca.components.iter().zip(&order) {
            let u = eig.eigenvectors.column(idx);
            let cos: f64 = c.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>().abs();
            let angle = cos.min(1.0).acos();
            assert!(angle < 1e-6, "angle {angle}");
        }
    }

    #[test]
    fn dims_above_width_rejected() {
        let m = matrix(&[vec![1.0], vec![2.0], vec![4.0]]);
        assert!(matches!(pca_fit(&m, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f32>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let shifted: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.iter().zip([10.0, -3.0, 0.5, 7.0]).map(|(x, s)| x + s).collect())
            .collect();
        let a = pca_project(&matrix(&rows)).unwrap();
        let b = pca_project(&matrix(&shifted)).unwrap();
        for (p, q) in a.coords().iter().zip(b.coords()) {
            assert!((p[0] - q[0]).abs() < 1e-4 && (p[1] - q[1]).abs() < 1e-4);
        }
    }
}
