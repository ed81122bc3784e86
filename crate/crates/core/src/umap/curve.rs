use crate::error::{Error, Result};

/// Number of samples of the target curve on `[0, 3 * spread]`.
pub const CURVE_SAMPLES: usize = 300;

/// Fitted output-kernel parameters for `1 / (1 + a * x^(2b))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit {
    pub a: f64,
    pub b: f64,
    /// Sum of squared errors over the sample grid.
    pub residual: f64,
}

/// Output kernel `phi(x) = 1 / (1 + a * x^(2b))`.
#[inline]
pub fn phi(x: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * x.powf(2.0 * b))
}

/// Piecewise target: flat at 1 up to `min_dist`, exponential decay after.
pub fn target_curve(x: f64, min_dist: f64, spread: f64) -> f64 {
    if x <= min_dist {
        1.0
    } else {
        (-(x - min_dist) / spread).exp()
    }
}

pub fn curve_grid(spread: f64) -> Vec<f64> {
    let hi = 3.0 * spread;
    (0..CURVE_SAMPLES)
        .map(|i| hi * i as f64 / (CURVE_SAMPLES - 1) as f64)
        .collect()
}

fn sse(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (phi(x, a, b) - y).powi(2)).sum()
}

/// Least-squares fit of `(a, b)` by Levenberg-Marquardt from `(1, 1)`.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<CurveFit> {
    if !(min_dist > 0.0 && spread > 0.0 && min_dist < spread) {
        return Err(Error::param(format!(
            "need 0 < min_dist < spread (min_dist = {min_dist}, spread = {spread})"
        )));
    }
    let xs = curve_grid(spread);
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();

    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut cost = sse(&xs, &ys, a, b);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..1000 {
        // Normal equations J^T J and J^T r.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                // phi(0) = 1 for all (a, b); derivatives vanish.
                continue;
            }
            let t = x.powf(2.0 * b);
            let denom = 1.0 + a * t;
            let r = 1.0 / denom - y;
            let da = -t / (denom * denom);
            let db = -a * t * 2.0 * x.ln() / (denom * denom);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let m_aa = jaa * (1.0 + lambda);
            let m_bb = jbb * (1.0 + lambda);
            let det = m_aa * m_bb - jab * jab;
            if det.abs() < f64::MIN_POSITIVE {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(m_bb * ga - jab * gb) / det;
            let step_b = -(m_aa * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let new_cost = sse(&xs, &ys, na, nb);
                if new_cost.is_finite() && new_cost <= cost {
                    let rel = (step_a / a).abs().max((step_b / b).abs());
                    let improvement = cost - new_cost;
                    a = na;
                    b = nb;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < 1e-12 || improvement <= 1e-15 * cost.max(1e-300) {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: at a stationary point.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged || !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric(format!(
            "curve fit did not converge (a = {a}, b = {b}, residual = {cost})"
        )));
    }
    Ok(CurveFit { a, b, residual: cost })
}
