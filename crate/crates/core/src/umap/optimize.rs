use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{config_hash, Embedding};
use crate::error::{Error, Result};
use crate::fuzzy::FuzzyGraph;

use super::{ExecMode, UmapConfig};

/// Per-coordinate bound on a single gradient step.
pub const GRADIENT_CLIP: f64 = 4.0;
/// Added to the squared distance in the repulsive denominator.
pub const REPULSION_DISTANCE_FLOOR: f64 = 1e-3;

/// `log phi(d)` for `phi(d) = 1 / (1 + a d^2b)`.
pub fn log_phi(d: f64, a: f64, b: f64) -> f64 {
    -(a * d.powf(2.0 * b)).ln_1p()
}

/// `log(1 - phi(d))`.
pub fn log_one_minus_phi(d: f64, a: f64, b: f64) -> f64 {
    let t = a * d.powf(2.0 * b);
    t.ln() - t.ln_1p()
}

/// Coefficient `c` such that `c * (y_i - y_j)` is the gradient of
/// `log phi(|y_i - y_j|)` with respect to `y_i`.
#[inline]
pub fn attractive_coeff(dist_sq: f64, a: f64, b: f64) -> f64 {
    if dist_sq <= 0.0 {
        return 0.0;
    }
    -2.0 * a * b * dist_sq.powf(b - 1.0) / (1.0 + a * dist_sq.powf(b))
}

/// Coefficient `c` such that `c * (y_i - y_j)` is the gradient of
/// `log(1 - phi(|y_i - y_j|))` with respect to `y_i`, with `floor` added to
/// the squared distance in the denominator.
#[inline]
pub fn repulsive_coeff(dist_sq: f64, a: f64, b: f64, floor: f64) -> f64 {
    2.0 * b / ((floor + dist_sq) * (1.0 + a * dist_sq.powf(b)))
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

/// Shared coordinate store. Relaxed atomics let fast mode update points from
/// several workers without locks; in deterministic mode only one worker runs.
struct Coords(Vec<[AtomicU64; 2]>);

impl Coords {
    fn new(init: &[[f64; 2]]) -> Self {
        Coords(
            init.iter()
                .map(|p| [AtomicU64::new(p[0].to_bits()), AtomicU64::new(p[1].to_bits())])
                .collect(),
        )
    }

    #[inline]
    fn get(&self, i: usize) -> [f64; 2] {
        let p = &self.0[i];
        [
            f64::from_bits(p[0].load(Ordering::Relaxed)),
            f64::from_bits(p[1].load(Ordering::Relaxed)),
        ]
    }

    #[inline]
    fn add(&self, i: usize, delta: [f64; 2]) {
        let p = self.get(i);
        self.0[i][0].store((p[0] + delta[0]).to_bits(), Ordering::Relaxed);
        self.0[i][1].store((p[1] + delta[1]).to_bits(), Ordering::Relaxed);
    }

    fn snapshot(&self) -> Vec<[f64; 2]> {
        (0..self.0.len()).map(|i| self.get(i)).collect()
    }
}

/// Sampling schedule for one graph edge.
#[derive(Clone)]
struct EdgeSchedule {
    head: u32,
    tail: u32,
    epochs_per_sample: f64,
    next_sample: f64,
    epochs_per_negative: f64,
    next_negative: f64,
}

struct Params {
    a: f64,
    b: f64,
    n: usize,
}

fn run_edges(edges: &mut [EdgeSchedule], coords: &Coords, p: &Params, epoch: f64, alpha: f64, rng: &mut ChaCha8Rng) {
    for e in edges.iter_mut() {
        if e.next_sample > epoch {
            continue;
        }
        let (j, k) = (e.head as usize, e.tail as usize);
        let cur = coords.get(j);
        let other = coords.get(k);
        let diff = [cur[0] - other[0], cur[1] - other[1]];
        let dist_sq = diff[0] * diff[0] + diff[1] * diff[1];
        let c = attractive_coeff(dist_sq, p.a, p.b);
        let g = [clip(c * diff[0]) * alpha, clip(c * diff[1]) * alpha];
        coords.add(j, g);
        coords.add(k, [-g[0], -g[1]]);
        e.next_sample += e.epochs_per_sample;

        let n_neg = ((epoch - e.next_negative) / e.epochs_per_negative).floor().max(0.0) as usize;
        for _ in 0..n_neg {
            let k = rng.random_range(0..p.n);
            if k == j {
                continue;
            }
            let cur = coords.get(j);
            let other = coords.get(k);
            let diff = [cur[0] - other[0], cur[1] - other[1]];
            let dist_sq = diff[0] * diff[0] + diff[1] * diff[1];
            let g = if dist_sq > 0.0 {
                let c = repulsive_coeff(dist_sq, p.a, p.b, REPULSION_DISTANCE_FLOOR);
                [clip(c * diff[0]), clip(c * diff[1])]
            } else {
                [GRADIENT_CLIP, GRADIENT_CLIP]
            };
            coords.add(j, [g[0] * alpha, g[1] * alpha]);
        }
        e.next_negative += n_neg as f64 * e.epochs_per_negative;
    }
}

fn chunk_seed(seed: u64, epoch: usize, chunk: usize) -> u64 {
    // splitmix64 over the three inputs.
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((chunk as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stochastic gradient descent on the fuzzy cross-entropy.
///
/// Edges are sampled at a rate proportional to their weight (the heaviest
/// edge once per epoch); every attractive step along an edge is followed by
/// `negative_sample_rate` repulsive steps against uniformly drawn points.
/// The learning rate decays linearly from `cfg.learning_rate` towards 0.
pub fn optimize_layout(fg: &FuzzyGraph, init: &Embedding, cfg: &UmapConfig, a: f64, b: f64) -> Result<Embedding> {
    cfg.validate()?;
    let n = fg.n();
    if init.len() != n {
        return Err(Error::Alignment(format!(
            "initial layout has {} points, graph has {n}",
            init.len()
        )));
    }
    let max_w = fg.edges().iter().map(|e| e.weight).fold(0.0f64, f64::max);
    let n_epochs = cfg.n_epochs as f64;
    let mut edges: Vec<EdgeSchedule> = fg
        .edges()
        .iter()
        .filter_map(|e| {
            let eps = max_w / e.weight;
            // Edges too weak to be sampled even once are dropped.
            (eps <= n_epochs).then(|| EdgeSchedule {
                head: e.i,
                tail: e.j,
                epochs_per_sample: eps,
                next_sample: eps,
                epochs_per_negative: eps / cfg.negative_sample_rate as f64,
                next_negative: eps / cfg.negative_sample_rate as f64,
            })
        })
        .collect();

    let coords = Coords::new(&init.to_f64());
    let params = Params { a, b, n };
    let n_chunks = match cfg.mode {
        ExecMode::Deterministic => 1,
        ExecMode::Fast => (rayon::current_num_threads() * 4).max(1),
    };
    let chunk_len = edges.len().div_ceil(n_chunks).max(1);

    for epoch in 1..=cfg.n_epochs {
        let alpha = cfg.learning_rate * (1.0 - (epoch - 1) as f64 / n_epochs);
        let epoch_f = epoch as f64;
        match cfg.mode {
            ExecMode::Deterministic => {
                let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.rng_seed, epoch, 0));
                run_edges(&mut edges, &coords, &params, epoch_f, alpha, &mut rng);
            }
            ExecMode::Fast => {
                edges.par_chunks_mut(chunk_len).enumerate().for_each(|(ci, chunk)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.rng_seed, epoch, ci));
                    run_edges(chunk, &coords, &params, epoch_f, alpha, &mut rng);
                });
            }
        }
        if let Some(i) = (0..n).find(|&i| {
            let p = coords.get(i);
            !p[0].is_finite() || !p[1].is_finite()
        }) {
            return Err(Error::Numeric(format!(
                "non-finite coordinate for point {i} in epoch {epoch}"
            )));
        }
    }

    Embedding::from_f64(&coords.snapshot(), "umap", &config_hash(cfg), cfg.rng_seed)
}
