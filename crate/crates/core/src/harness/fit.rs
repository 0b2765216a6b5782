//! Log-log slope fits with replica-bootstrap intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::Stat;
use crate::rng::replica_rng;

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Stream reserved for bootstrap draws, away from replica streams.
const BOOTSTRAP_STREAM: u64 = u64::MAX;

/// Weighted least squares `y ≈ a + b x`; returns `(a, b)`.
pub fn weighted_ols(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, b), w)| w * (a - mx) * (b - my))
        .sum();
    let sxx: f64 = x.iter().zip(w).map(|(a, w)| w * (a - mx) * (a - mx)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Abscissae before taking logs.
    pub x: Vec<f64>,
    /// Ensemble means before taking logs.
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// 95% percentile bootstrap interval of the slope.
    pub ci: (f64, f64),
}

/// Fits `log mean(samples_i)` against `log x_i`, weighting each point by the
/// inverse width of its 95% interval on the log scale, and bootstraps the
/// slope by resampling replicas within each point.
///
/// Returns `None` with fewer than two points or any non-positive mean.
pub fn fit_loglog(x: &[f64], samples: &[Vec<f64>], seed: u64) -> Option<SlopeFit> {
    if x.len() < 2 || x.len() != samples.len() {
        return None;
    }
    let stats: Vec<Stat> = samples.iter().map(|s| Stat::of(s)).collect();
    if stats.iter().any(|s| !(s.mean > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = stats.iter().map(|s| s.mean.ln()).collect();
    let widths: Vec<f64> = stats.iter().map(|s| 2.0 * s.ci_half / s.mean).collect();
    let weights: Vec<f64> = if widths.iter().all(|w| *w > 0.0) {
        widths.iter().map(|w| 1.0 / w).collect()
    } else {
        vec![1.0; x.len()]
    };
    let (intercept, slope) = weighted_ols(&lx, &ly, &weights);

    let mut rng = replica_rng(seed, BOOTSTRAP_STREAM);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut by = Vec::with_capacity(x.len());
        for s in samples {
            let mean = (0..s.len()).map(|_| s[rng.random_range(0..s.len())]).sum::<f64>() / s.len() as f64;
            by.push(mean.max(f64::MIN_POSITIVE).ln());
        }
        slopes.push(weighted_ols(&lx, &by, &weights).1);
    }
    slopes.sort_by(f64::total_cmp);
    let pick = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round()) as usize];
    Some(SlopeFit {
        x: x.to_vec(),
        y: stats.iter().map(|s| s.mean).collect(),
        weights,
        slope,
        intercept,
        ci: (pick(0.025), pick(0.975)),
    })
}
