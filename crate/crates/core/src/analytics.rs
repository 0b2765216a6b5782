//! Ensemble statistics over particle traces: moment envelopes, martingale
//! bounds, compensated counting processes and large-deviation frequencies.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::Species;
use crate::particle::{PathTrace, TransitionClass};
use crate::rng::replica_rng;

/// Fewest replicas accepted by the ensemble reports.
pub const MIN_REPLICAS: usize = 30;

/// Normal quantile for two-sided 95% intervals.
const Z95: f64 = 1.959963984540054;

fn need_replicas(n: usize) -> Result<()> {
    if n < MIN_REPLICAS {
        return Err(Error::InsufficientReplicas {
            needed: MIN_REPLICAS,
            got: n,
        });
    }
    Ok(())
}

/// Summary statistics of one scalar over replicas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    pub std_err: f64,
    /// 95% normal half-width, `1.96 · std_err`.
    pub ci_half: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        let std_err = (var / nf).sqrt();
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            n,
            mean,
            var,
            std_err,
            ci_half: Z95 * std_err,
            q05: quantile(&sorted, 0.05),
            q50: quantile(&sorted, 0.5),
            q95: quantile(&sorted, 0.95),
        }
    }
}

/// Time series of one observable across the ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub stats: Vec<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_replicas: usize,
    pub series: Vec<ObservableSeries>,
}

impl EnsembleSummary {
    pub fn get(&self, name: &str) -> Option<&ObservableSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    /// Flat CSV, one row per `(label, observable, time)`.
    pub fn write_csv<W: Write>(&self, w: W, label: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "config", "observable", "t", "n", "mean", "var", "ci_half", "q05", "q50", "q95",
        ])?;
        for s in &self.series {
            for (t, st) in s.times.iter().zip(&s.stats) {
                out.write_record(&[
                    label.to_string(),
                    s.name.clone(),
                    t.to_string(),
                    st.n.to_string(),
                    st.mean.to_string(),
                    st.var.to_string(),
                    st.ci_half.to_string(),
                    st.q05.to_string(),
                    st.q50.to_string(),
                    st.q95.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn class_name(c: TransitionClass) -> &'static str {
    match c {
        TransitionClass::Births1 => "births1",
        TransitionClass::Deaths1 => "deaths1",
        TransitionClass::Births2 => "births2",
        TransitionClass::Deaths2 => "deaths2",
    }
}

/// Sample times shared by all traces.
fn common_times(traces: &[PathTrace]) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .ok_or(Error::InsufficientReplicas { needed: 1, got: 0 })?;
    let times: Vec<f64> = first.samples.iter().map(|s| s.t).collect();
    for tr in traces {
        if tr.samples.len() != times.len() || tr.samples.iter().zip(&times).any(|(s, t)| s.t != *t) {
            return Err(Error::Config("traces do not share sample times".into()));
        }
    }
    Ok(times)
}

fn series(
    name: &str,
    traces: &[PathTrace],
    times: &[f64],
    f: impl Fn(&PathTrace, usize) -> f64,
) -> ObservableSeries {
    let stats = (0..times.len())
        .map(|i| Stat::of(&traces.iter().map(|tr| f(tr, i)).collect::<Vec<_>>()))
        .collect();
    ObservableSeries {
        name: name.to_string(),
        times: times.to_vec(),
        stats,
    }
}

/// Masses, martingale norms, `H_i`, jump counters, intensities and the
/// compensated counters `N_A − I_A` (raw) at every sample time.
pub fn ensemble_summary(traces: &[PathTrace]) -> Result<EnsembleSummary> {
    let times = common_times(traces)?;
    let mut out = Vec::new();
    for s in Species::BOTH {
        let i = s.index();
        let k = i + 1;
        out.push(series(&format!("mass{k}"), traces, &times, |tr, t| {
            tr.samples[t].mass(s, tr.n_scale)
        }));
        out.push(series(&format!("mart_sq{k}"), traces, &times, |tr, t| tr.samples[t].mart_sq[i]));
        out.push(series(&format!("h{k}"), traces, &times, |tr, t| tr.samples[t].h[i]));
    }
    for c in TransitionClass::ALL {
        let i = c.index();
        let name = class_name(c);
        out.push(series(&format!("n_{name}"), traces, &times, |tr, t| tr.samples[t].jumps[i] as f64));
        out.push(series(&format!("i_{name}"), traces, &times, |tr, t| {
            tr.samples[t].raw_intensity[i] / (tr.m as f64 * tr.n_scale as f64)
        }));
        out.push(series(&format!("compensated_{name}"), traces, &times, |tr, t| {
            tr.samples[t].jumps[i] as f64 - tr.samples[t].raw_intensity[i]
        }));
    }
    Ok(EnsembleSummary {
        n_replicas: traces.len(),
        series: out,
    })
}

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: f64,
    /// `moment1`, `moment2`: ensemble means of `‖U‖^p_{1,M}`, `‖V‖^p_{1,M}`.
    pub summary: EnsembleSummary,
    /// Fit `ψ(t) ≈ A ψ(0) e^{ĉ t}` of `ψ = 𝔼[‖U‖^p_{1,M} + ‖V‖^p_{1,M}]`.
    pub envelope_rate: f64,
    pub envelope_prefactor: f64,
}

pub fn moment_report(traces: &[PathTrace], p: f64) -> Result<MomentReport> {
    if !(p >= 1.0) {
        return Err(Error::Config(format!("moment order {p} must be >= 1")));
    }
    need_replicas(traces.len())?;
    let times = common_times(traces)?;
    let moments: Vec<ObservableSeries> = Species::BOTH
        .iter()
        .map(|&s| {
            series(&format!("moment{}", s.index() + 1), traces, &times, |tr, t| {
                tr.samples[t].mass(s, tr.n_scale).powf(p)
            })
        })
        .collect();
    let psi: Vec<f64> = (0..times.len())
        .map(|i| moments[0].stats[i].mean + moments[1].stats[i].mean)
        .collect();
    let (rate, prefactor) = if psi[0] > 0.0 && psi.iter().all(|x| *x > 0.0) {
        let logs: Vec<f64> = psi.iter().map(|x| (x / psi[0]).ln()).collect();
        let (a, b) = ols(&times, &logs);
        (b, a.exp())
    } else {
        (0.0, 0.0)
    };
    Ok(MomentReport {
        p,
        summary: EnsembleSummary {
            n_replicas: traces.len(),
            series: moments,
        },
        envelope_rate: rate,
        envelope_prefactor: prefactor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub n_replicas: usize,
    pub m: usize,
    pub n_scale: u64,
    /// `𝔼[sup_t ‖𝓜_i‖²_{-1,M}]` per species.
    pub sup_mart_sq: [Stat; 2],
    /// `𝔼[sup_t |H_i|]`.
    pub sup_abs_h: [Stat; 2],
    /// `(1/N) 𝔼[∫ (1/M) Σ (1 + U² + V²)]`.
    pub rhs_functional: Stat,
    /// `𝔼[sup ‖𝓜_i‖²] / rhs`.
    pub ratio: [f64; 2],
    /// Largest `|mean 𝓜_1(T)_j| / (std_j / √R)` over sites.
    pub mean_zero_score: f64,
    pub mean_zero_pass: bool,
}

/// Threshold, in standard errors, for ensemble means expected to vanish.
pub const MEAN_ZERO_SIGMAS: f64 = 4.0;

pub fn martingale_report(traces: &[PathTrace]) -> Result<MartingaleReport> {
    need_replicas(traces.len())?;
    let sums: Vec<_> = traces
        .iter()
        .map(|tr| {
            tr.martingale
                .as_ref()
                .ok_or_else(|| Error::Config("trace was run without martingale tracking".into()))
        })
        .collect::<Result<_>>()?;
    let pick = |f: &dyn Fn(&crate::particle::MartingaleSummary) -> f64| -> Stat {
        Stat::of(&sums.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    let sup_mart_sq = [pick(&|s| s.sup_mart_sq[0]), pick(&|s| s.sup_mart_sq[1])];
    let sup_abs_h = [pick(&|s| s.sup_abs_h[0]), pick(&|s| s.sup_abs_h[1])];
    let rhs_functional = pick(&|s| s.rhs_functional);
    let ratio = [0, 1].map(|i| {
        if rhs_functional.mean > 0.0 {
            sup_mart_sq[i].mean / rhs_functional.mean
        } else {
            0.0
        }
    });

    let m = traces[0].m;
    let mut score: f64 = 0.0;
    for j in 0..m {
        let xs: Vec<f64> = traces
            .iter()
            .filter_map(|tr| tr.mart_final.as_ref().map(|mf| mf[0][j]))
            .collect();
        let st = Stat::of(&xs);
        if st.std_err > 0.0 {
            score = score.max(st.mean.abs() / st.std_err);
        } else if st.mean != 0.0 {
            score = f64::INFINITY;
        }
    }
    Ok(MartingaleReport {
        n_replicas: traces.len(),
        m,
        n_scale: traces[0].n_scale,
        sup_mart_sq,
        sup_abs_h,
        rhs_functional,
        ratio,
        mean_zero_score: score,
        mean_zero_pass: score <= MEAN_ZERO_SIGMAS,
    })
}

/// Worst `|mean(N_A − I_A)| / std_err` over sample times, per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensatorReport {
    pub worst_score: [f64; 4],
    pub pass: bool,
}

pub fn compensator_check(traces: &[PathTrace]) -> Result<CompensatorReport> {
    let summary = ensemble_summary(traces)?;
    let mut worst = [0.0_f64; 4];
    for c in TransitionClass::ALL {
        let s = summary
            .get(&format!("compensated_{}", class_name(c)))
            .expect("series present");
        for st in &s.stats {
            let z = if st.std_err > 0.0 {
                st.mean.abs() / st.std_err
            } else if st.mean.abs() > 1e-9 {
                f64::INFINITY
            } else {
                0.0
            };
            worst[c.index()] = worst[c.index()].max(z);
        }
    }
    Ok(CompensatorReport {
        worst_score: worst,
        pass: worst.iter().all(|z| *z <= MEAN_ZERO_SIGMAS),
    })
}

/// Exact two-sided Clopper–Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Poisson rate function `h(ε) = (1 + ε) ln(1 + ε) − ε`.
pub fn poisson_rate_function(eps: f64) -> f64 {
    (1.0 + eps) * (1.0 + eps).ln() - eps
}

/// `2 exp(−K h(ε))`.
pub fn chernoff_bound(k: f64, eps: f64) -> f64 {
    2.0 * (-k * poisson_rate_function(eps)).exp()
}

/// `(1 + 1/(ε³K)) e^{−ε²K}`: the large-deviation bound with unit constants.
pub fn unit_constant_bound(k: f64, eps: f64) -> f64 {
    (1.0 + 1.0 / (eps.powi(3) * k)) * (-eps * eps * k).exp()
}

/// Frequency of `∃t ∈ 𝔍^K : |N(t) − I(t)| ≥ ε I(t)` over replicas, where
/// `𝔍^K = {t : max(N(t), I(t)) ≥ K}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub epsilon: f64,
    pub k_threshold: f64,
    pub n_replicas: u64,
    pub hits: u64,
    pub observed_freq: f64,
    /// 95% Clopper–Pearson interval.
    pub ci: (f64, f64),
    pub bound_value: f64,
    pub chernoff: f64,
}

impl DeviationReport {
    fn new(epsilon: f64, k: f64, hits: u64, n: u64) -> Self {
        Self {
            epsilon,
            k_threshold: k,
            n_replicas: n,
            hits,
            observed_freq: if n > 0 { hits as f64 / n as f64 } else { 0.0 },
            ci: clopper_pearson(hits, n, 0.95),
            bound_value: unit_constant_bound(k, epsilon),
            chernoff: chernoff_bound(k, epsilon),
        }
    }
}

/// Scans one counting path for the deviation event.
///
/// `jump_intensities` holds the (non-decreasing) compensator value at each
/// jump and `i_end` its value at the horizon. In the time-changed clock
/// `u = I(t)` the counter is piecewise constant and `|n − u| − εu` is convex
/// on each piece, so only piece endpoints and the entry point `u = K` need
/// checking.
pub fn deviation_event(jump_intensities: &[f64], i_end: f64, eps: f64, k: f64) -> bool {
    let hit = |n: f64, u: f64| (n - u).abs() >= eps * u;
    let mut a = 0.0;
    let ends = jump_intensities.iter().copied().chain(std::iter::once(i_end));
    for (n, b) in ends.enumerate() {
        let n = n as f64;
        let b = b.max(a);
        if n >= k {
            if hit(n, a) || hit(n, b) {
                return true;
            }
        } else if b >= k {
            let start = a.max(k);
            if hit(n, start) || hit(n, b) {
                return true;
            }
        }
        a = b;
    }
    false
}

/// Unit-rate Poisson processes on `[0, horizon]`: deviation frequency for
/// each `K` at fixed `ε`. Replica `r` draws from stream `r` of `seed`.
pub fn ld_poisson_check(horizon: f64, eps: f64, k_grid: &[f64], n_replicas: u64, seed: u64) -> Vec<DeviationReport> {
    let paths: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rng = replica_rng(seed, r);
            let mut t = 0.0;
            let mut jumps = Vec::new();
            loop {
                t += -(1.0 - rng.random::<f64>()).ln();
                if t > horizon {
                    break;
                }
                jumps.push(t);
            }
            jumps
        })
        .collect();
    k_grid
        .iter()
        .map(|&k| {
            let hits = paths
                .par_iter()
                .filter(|p| deviation_event(p, horizon, eps, k))
                .count() as u64;
            DeviationReport::new(eps, k, hits, n_replicas)
        })
        .collect()
}

/// Deviation frequency of the raw counter of `class` against its raw
/// compensator; traces must be run with counting records.
pub fn ld_process_check(traces: &[PathTrace], class: TransitionClass, eps: f64, k: f64) -> Result<DeviationReport> {
    let mut hits = 0;
    for tr in traces {
        let rec = tr
            .account
            .records(class)
            .ok_or_else(|| Error::Config("trace was run without counting records".into()))?;
        let jumps: Vec<f64> = rec.iter().map(|&(_, i)| i).collect();
        if deviation_event(&jumps, tr.account.raw_intensity(class), eps, k) {
            hits += 1;
        }
    }
    Ok(DeviationReport::new(eps, k, hits, traces.len() as u64))
}

/// Slope of `ln(freq)` against `ε²K` over reports with positive frequency.
pub fn log_frequency_slope(reports: &[DeviationReport]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .filter(|r| r.observed_freq > 0.0)
        .map(|r| (r.epsilon * r.epsilon * r.k_threshold, r.observed_freq.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(ols(&x, &y).1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub c_hat: f64,
    pub threshold: f64,
    /// Per replica: `sup_s (I_B(s) + I_D(s) + [U(s)]_M) e^{−ĉ s}` over samples.
    pub statistics: Vec<f64>,
    pub exceedances: u64,
    pub exceedance_freq: f64,
    pub ci: (f64, f64),
}

/// `(I_B + I_D + [U]_M)(s)` for species 1 with normalised intensities.
fn envelope_path(tr: &PathTrace) -> impl Iterator<Item = (f64, f64)> + '_ {
    let scale = tr.m as f64 * tr.n_scale as f64;
    let (b, d) = (TransitionClass::Births1.index(), TransitionClass::Deaths1.index());
    tr.samples.iter().map(move |s| {
        let val = (s.raw_intensity[b] + s.raw_intensity[d]) / scale + s.mass(Species::U, tr.n_scale);
        (s.t, val)
    })
}

/// Growth rate of the ensemble mean of `I_B + I_D + [U]_M`, floored at 0.
pub fn fit_envelope_rate(traces: &[PathTrace]) -> Result<f64> {
    let times = common_times(traces)?;
    let mut means = vec![0.0; times.len()];
    for tr in traces {
        for (i, (_, v)) in envelope_path(tr).enumerate() {
            means[i] += v / traces.len() as f64;
        }
    }
    if means.iter().any(|m| *m <= 0.0) {
        return Ok(0.0);
    }
    let logs: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    Ok(ols(&times, &logs).1.max(0.0))
}

/// Frequency with which the discounted envelope statistic exceeds `threshold`.
pub fn intensity_envelope_check(traces: &[PathTrace], c_hat: f64, threshold: f64) -> EnvelopeReport {
    let statistics: Vec<f64> = traces
        .iter()
        .map(|tr| {
            envelope_path(tr)
                .map(|(t, v)| v * (-c_hat * t).exp())
                .fold(0.0, f64::max)
        })
        .collect();
    let exceedances = statistics.iter().filter(|s| **s > threshold).count() as u64;
    let n = statistics.len() as u64;
    EnvelopeReport {
        c_hat,
        threshold,
        exceedance_freq: if n > 0 { exceedances as f64 / n as f64 } else { 0.0 },
        ci: clopper_pearson(exceedances, n, 0.95),
        exceedances,
        statistics,
    }
}
