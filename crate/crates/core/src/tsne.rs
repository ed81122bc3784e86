//! Exact t-SNE with a two-phase exaggeration schedule.
//!
//! The attractive part of the gradient is multiplied by `early_exaggeration`
//! for the first `early_steps` iterations and by `main_exaggeration` for the
//! remaining `main_steps`. A main factor of 1 is ordinary t-SNE; larger
//! factors pull clusters tighter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{config_hash, Embedding};
use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;

pub const ENTROPY_TOL: f64 = 1e-10;
const ENTROPY_MAX_ITERS: usize = 200;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub early_exaggeration: f64,
    pub early_steps: usize,
    pub main_exaggeration: f64,
    pub main_steps: usize,
    /// Upper bound on the step size; each phase uses
    /// `min(learning_rate, n / exaggeration)`.
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Step at which momentum switches from initial to final.
    pub momentum_switch: usize,
    pub rng_seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            early_exaggeration: 12.0,
            early_steps: 250,
            main_exaggeration: 1.0,
            main_steps: 500,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            rng_seed: 42,
        }
    }
}

impl TsneConfig {
    /// Factor-4 exaggeration after the early phase.
    pub fn exaggerated() -> Self {
        TsneConfig {
            main_exaggeration: 4.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 10 {
            return Err(Error::param(format!("t-SNE needs at least 10 points (got {n})")));
        }
        if !(self.perplexity > 0.0 && self.perplexity < (n - 1) as f64 / 3.0) {
            return Err(Error::param(format!(
                "perplexity {} infeasible for {n} points (must be below {})",
                self.perplexity,
                (n - 1) as f64 / 3.0
            )));
        }
        if self.early_exaggeration < 1.0 || self.main_exaggeration < 1.0 {
            return Err(Error::param("exaggeration factors must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Shannon entropy (nats) of a probability row.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Conditional distribution `p_{j|i}` over the other points, with the
/// Gaussian precision chosen by bisection so the row's entropy equals
/// `ln(perplexity)`. `sq_dists[self_index]` is ignored.
pub fn conditional_row(sq_dists: &[f64], self_index: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let min_d = sq_dists
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_index)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0f64; sq_dists.len()];
    let fill = |beta: f64, p: &mut [f64]| -> f64 {
        let mut sum = 0.0;
        for (j, (pj, &d)) in p.iter_mut().zip(sq_dists).enumerate() {
            *pj = if j == self_index {
                0.0
            } else {
                (-beta * (d - min_d)).exp()
            };
            sum += *pj;
        }
        p.iter_mut().for_each(|x| *x /= sum);
        row_entropy(p)
    };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0 / sq_dists.iter().copied().fold(0.0, f64::max).max(1e-300);
    for _ in 0..ENTROPY_MAX_ITERS {
        let h = fill(beta, &mut p);
        if (h - target).abs() < ENTROPY_TOL {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
    }
    fill(beta, &mut p);
    p
}

fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Conditional rows `p_{j|i}`, row-major `n x n`.
pub fn conditional_probabilities(m: &FeatureMatrix, perplexity: f64) -> Vec<f64> {
    let n = m.n_samples();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n).map(|j| sq_distance(m.row(i), m.row(j))).collect();
            conditional_row(&d, i, perplexity)
        })
        .collect();
    rows.concat()
}

/// Symmetric joint probabilities `(p_{j|i} + p_{i|j}) / 2n`, summing to 1.
pub fn joint_probabilities(m: &FeatureMatrix, perplexity: f64) -> Vec<f64> {
    let n = m.n_samples();
    let cond = conditional_probabilities(m, perplexity);
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

/// Student-t kernel sum `Z = sum_{i != j} (1 + |y_i - y_j|^2)^-1`.
fn kernel_sum(y: &[[f64; 2]]) -> f64 {
    let partial: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            (0..y.len())
                .filter(|&j| j != i)
                .map(|j| 1.0 / (1.0 + sq2(y[i], y[j])))
                .sum()
        })
        .collect();
    partial.iter().sum()
}

#[inline]
fn sq2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Attractive and repulsive parts of the KL gradient.
///
/// `attr_i = 4 sum_j p_ij w_ij (y_i - y_j)`, `rep_i = -4 sum_j q_ij w_ij (y_i - y_j)`
/// with `w_ij = (1 + |y_i - y_j|^2)^-1` and `q_ij = w_ij / Z`. The gradient
/// under exaggeration `e` is `e * attr + rep`.
pub fn gradient_parts(p: &[f64], y: &[[f64; 2]]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let n = y.len();
    let z = kernel_sum(y);
    let parts: Vec<([f64; 2], [f64; 2])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut attr = [0.0f64; 2];
            let mut rep = [0.0f64; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = 1.0 / (1.0 + sq2(y[i], y[j]));
                let dx = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let pa = 4.0 * p[i * n + j] * w;
                let qr = 4.0 * (w / z) * w;
                attr[0] += pa * dx[0];
                attr[1] += pa * dx[1];
                rep[0] -= qr * dx[0];
                rep[1] -= qr * dx[1];
            }
            (attr, rep)
        })
        .collect();
    parts.into_iter().unzip()
}

pub fn gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let (attr, rep) = gradient_parts(p, y);
    attr.iter()
        .zip(&rep)
        .map(|(a, r)| [exaggeration * a[0] + r[0], exaggeration * a[1] + r[1]])
        .collect()
}

/// Exaggerated KL objective whose gradient is [`gradient`]:
/// `sum p log p - e * sum p log w + log Z`. At `e = 1` this is `KL(P || Q)`.
pub fn exaggerated_kl(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> f64 {
    let n = y.len();
    let mut plogp = 0.0;
    let mut plogw = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            if pij > 0.0 {
                plogp += pij * pij.ln();
                plogw -= pij * (1.0 + sq2(y[i], y[j])).ln();
            }
        }
    }
    plogp - exaggeration * plogw + kernel_sum(y).ln()
}

pub fn tsne_embed(m: &FeatureMatrix, cfg: &TsneConfig) -> Result<Embedding> {
    let n = m.n_samples();
    cfg.validate(n)?;
    let p = joint_probabilities(m, cfg.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];

    let total = cfg.early_steps + cfg.main_steps;
    for step in 0..total {
        let exaggeration = if step < cfg.early_steps {
            cfg.early_exaggeration
        } else {
            cfg.main_exaggeration
        };
        let momentum = if step < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        // Steps above n / exaggeration oscillate instead of converging.
        let lr = cfg.learning_rate.min(n as f64 / exaggeration);
        let grad = gradient(&p, &y, exaggeration);
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                gains[i][d] = if (g > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * g;
                y[i][d] += update[i][d];
            }
        }
        let (cx, cy) = y.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for pt in &mut y {
            pt[0] -= cx / n as f64;
            pt[1] -= cy / n as f64;
        }
        if y.iter().any(|pt| !pt[0].is_finite() || !pt[1].is_finite()) {
            return Err(Error::Numeric(format!("non-finite t-SNE coordinates at step {step}")));
        }
    }
    Embedding::from_f64(&y, "tsne", &config_hash(cfg), cfg.rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(d, values, (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn rows_hit_target_entropy() {
        let m = random_matrix(60, 5, 1);
        let cond = conditional_probabilities(&m, 10.0);
        for i in 0..60 {
            let row = &cond[i * 60..(i + 1) * 60];
            assert!((row_entropy(row) - 10f64.ln()).abs() < 1e-5, "row {i}");
            assert_eq!(row[i], 0.0);
        }
    }

    #[test]
    fn joint_is_symmetric_and_normalized() {
        let m = random_matrix(40, 3, 2);
        let p = joint_probabilities(&m, 5.0);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..40 {
            for j in 0..40 {
                assert_eq!(p[i * 40 + j], p[j * 40 + i]);
                assert!(p[i * 40 + j] >= 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_matrix(25, 4, 3);
        let p = joint_probabilities(&m, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<[f64; 2]> = (0..25)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        for e in [1.0, 4.0, 12.0] {
            let g = gradient(&p, &y, e);
            for (i, d) in [(0, 0), (7, 1), (24, 0)] {
                let h = 1e-5;
                let mut yp = y.clone();
                yp[i][d] += h;
                let mut ym = y.clone();
                ym[i][d] -= h;
                let fd = (exaggerated_kl(&p, &yp, e) - exaggerated_kl(&p, &ym, e)) / (2.0 * h);
                assert!(((g[i][d] - fd) / fd).abs() < 1e-4, "e={e} i={i} d={d}");
            }
        }
    }

    #[test]
    fn exaggeration_scales_only_attraction() {
        let m = random_matrix(20, 3, 5);
        let p = joint_probabilities(&m, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let (attr, rep) = gradient_parts(&p, &y);
        let g1 = gradient(&p, &y, 1.0);
        let g4 = gradient(&p, &y, 4.0);
        for i in 0..20 {
            for d in 0..2 {
                assert!((g1[i][d] - (attr[i][d] + rep[i][d])).abs() < 1e-15);
                assert!((g4[i][d] - (4.0 * attr[i][d] + rep[i][d])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn infeasible_perplexity_rejected() {
        let m = random_matrix(31, 2, 1);
        let cfg = TsneConfig {
            perplexity: 10.0,
            ..Default::default()
        };
        assert!(matches!(tsne_embed(&m, &cfg), Err(Error::Parameter(_))));
        let tiny = random_matrix(9, 2, 1);
        assert!(tsne_embed(
            &tiny,
            &TsneConfig {
                perplexity: 1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn short_run_is_finite_and_deterministic() {
        let m = random_matrix(40, 3, 7);
        let cfg = TsneConfig {
            perplexity: 5.0,
            early_steps: 20,
            main_steps: 20,
            momentum_switch: 20,
            ..Default::default()
        };
        let a = tsne_embed(&m, &cfg).unwrap();
        let b = tsne_embed(&m, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, "tsne");
    }
}
