//! Path simulation: exact SSA with online tracking, and approximate
//! tau-leaping.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::interp::{prolong, InterpNorms, MixedNormAccumulator, NormMode};
use crate::model::{RateModel, Species};
use crate::semidiscrete::{plan_for, ReferenceSolution};

use super::state::{slot, Event, EventKind, ParticleState};
use super::tracker::{JumpAccount, MartingaleSummary, MartingaleTracker, TransitionClass};

/// Default cap on the total event rate.
pub const DEFAULT_RATE_BUDGET: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunControls {
    pub t_end: f64,
    pub sample_dt: f64,
    /// Abort with `RateOverflow` once the total rate exceeds this.
    pub rate_budget: f64,
    pub track_martingale: bool,
    /// Keep `(time, intensity)` for every birth and death.
    pub record_counting: bool,
    pub event_log: bool,
}

impl Default for RunControls {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            sample_dt: 0.01,
            rate_budget: DEFAULT_RATE_BUDGET,
            track_martingale: true,
            record_counting: false,
            event_log: false,
        }
    }
}

/// Fine-grid comparison target for a run on `m` sites.
#[derive(Clone, Debug)]
pub struct ReferenceTarget {
    fine: Arc<ReferenceSolution>,
    coarse: ReferenceSolution,
    norms: Arc<InterpNorms>,
}

impl ReferenceTarget {
    /// `kmax` truncates the Fourier sums of the continuous `H⁻¹` norm.
    pub fn new(fine: Arc<ReferenceSolution>, m: usize, kmax: usize) -> Result<Self> {
        let coarse = fine.restricted(m)?;
        let norms = Arc::new(InterpNorms::new(plan_for(fine.m_ref)?, kmax));
        Ok(Self { fine, coarse, norms })
    }

    /// Shares the fine data and norm weights with a different coarse size.
    pub fn with_m(&self, m: usize) -> Result<Self> {
        Ok(Self {
            fine: self.fine.clone(),
            coarse: self.fine.restricted(m)?,
            norms: self.norms.clone(),
        })
    }

    pub fn fine(&self) -> &ReferenceSolution {
        &self.fine
    }

    fn coarse_at(&self, t: f64) -> [GridFn; 2] {
        let i = self.coarse.index_at(t);
        [self.coarse.u_at(i), self.coarse.v_at(i)]
    }

    /// `(‖π_M U − u‖²_{H⁻¹}, ‖π_M U − u‖²_{L²})` per species at time `t`.
    fn gap(&self, state: &ParticleState, t: f64) -> [(f64, f64); 2] {
        let i = self.fine.index_at(t);
        let refs = [self.fine.u_at(i), self.fine.v_at(i)];
        Species::BOTH.map(|s| {
            let d = &prolong(&state.density(s), self.fine.m_ref) - &refs[s.index()];
            (self.norms.hm1_sq(&d), self.norms.l2_sq(&d))
        })
    }
}

/// State and running statistics at one sample time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub u: Vec<u64>,
    pub v: Vec<u64>,
    /// `N_A` per [`TransitionClass`].
    pub jumps: [u64; 4],
    /// Raw `I_A` per [`TransitionClass`].
    pub raw_intensity: [f64; 4],
    /// `‖𝓜_i‖²_{-1,M}`; zero when untracked.
    pub mart_sq: [f64; 2],
    pub h: [f64; 2],
}

impl Sample {
    pub fn counts(&self, s: Species) -> &[u64] {
        match s {
            Species::U => &self.u,
            Species::V => &self.v,
        }
    }

    /// `[U]_M = ‖U‖_{1,M}`.
    pub fn mass(&self, s: Species, n_scale: u64) -> f64 {
        let c = self.counts(s);
        c.iter().sum::<u64>() as f64 / (n_scale as f64 * c.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathTrace {
    pub replica: u64,
    pub m: usize,
    pub n_scale: u64,
    pub t_end: f64,
    pub samples: Vec<Sample>,
    pub account: JumpAccount,
    pub events: u64,
    /// Time at which every rate vanished, if it happened.
    pub absorbed_at: Option<f64>,
    /// Set for tau-leaped paths.
    pub approximate: bool,
    pub martingale: Option<MartingaleSummary>,
    /// `𝓜_i(T)` per species.
    pub mart_final: Option<[GridFn; 2]>,
    /// Largest gap between incremental and recomputed `𝓜` over samples.
    pub mart_check_error: Option<f64>,
    /// Continuous mixed-norm gap `|||π_M U_i − u_i|||²_T` per species.
    pub gap: Option<[f64; 2]>,
    /// `‖π_M U_i(0) − u_i(0)‖²_{H⁻¹}` per species.
    pub initial_gap: Option<[f64; 2]>,
    #[serde(skip)]
    pub event_log: Option<Vec<Event>>,
    pub leap_attempts: u64,
    pub leap_rejections: u64,
}

impl PathTrace {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("a trace holds at least the initial sample")
    }

    /// Sum of the continuous gaps of both species.
    pub fn total_gap(&self) -> Option<f64> {
        self.gap.map(|g| g[0] + g[1])
    }
}

fn snapshot(state: &ParticleState, account: &JumpAccount, tracker: Option<&MartingaleTracker>) -> Sample {
    let mut s = Sample {
        t: state.t,
        u: state.counts(Species::U).to_vec(),
        v: state.counts(Species::V).to_vec(),
        jumps: TransitionClass::ALL.map(|c| account.count(c)),
        raw_intensity: TransitionClass::ALL.map(|c| account.raw_intensity(c)),
        mart_sq: [0.0; 2],
        h: [0.0; 2],
    };
    if let Some(tr) = tracker {
        s.mart_sq = Species::BOTH.map(|sp| tr.mart_norm_sq(sp));
        s.h = Species::BOTH.map(|sp| tr.h(sp));
    }
    s
}

/// Exponential waiting time at rate `total`.
fn waiting_time(total: f64, rng: &mut impl Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / total
}

/// Advances the clocks to `t`, then picks and applies one event.
fn fire(
    state: &mut ParticleState,
    model: &RateModel,
    account: &mut JumpAccount,
    tracker: Option<&mut MartingaleTracker>,
    t: f64,
    rng: &mut impl Rng,
) -> Event {
    let total = state.total_rate();
    account.advance(state, t);
    state.t = t;
    let (species, kind, site) = state.select(rng.random::<f64>() * total);
    let ev = Event { t, species, kind, site };
    state.apply(model, &ev);
    account.record(&ev);
    if let Some(tr) = tracker {
        tr.advance(t);
        tr.on_event(model, state, &ev);
    }
    ev
}

/// One SSA step: waits an exponential time at the current total rate and
/// applies the selected event.
pub fn step_event(
    state: &mut ParticleState,
    model: &RateModel,
    account: &mut JumpAccount,
    tracker: Option<&mut MartingaleTracker>,
    rng: &mut impl Rng,
) -> Result<Event> {
    let total = state.total_rate();
    if !(total > 0.0) {
        return Err(Error::Extinct { t: state.t });
    }
    let t = state.t + waiting_time(total, rng);
    Ok(fire(state, model, account, tracker, t, rng))
}

fn check_controls(controls: &RunControls, t0: f64) -> Result<()> {
    if !(controls.sample_dt > 0.0) || !(controls.t_end >= t0) {
        return Err(Error::Config(format!(
            "need sample_dt > 0 and t_end >= {t0}, got sample_dt = {}, t_end = {}",
            controls.sample_dt, controls.t_end
        )));
    }
    Ok(())
}

/// Simulates exactly on `[state.t, t_end]`, sampling every `sample_dt`.
///
/// Waiting times are redrawn at sample boundaries, which leaves the law
/// unchanged by memorylessness.
pub fn run(
    state: ParticleState,
    model: &RateModel,
    controls: &RunControls,
    reference: Option<&ReferenceTarget>,
    replica: u64,
    rng: &mut impl Rng,
) -> Result<PathTrace> {
    let mut state = state;
    let t0 = state.t;
    check_controls(controls, t0)?;
    let m = state.m();
    let mut account = JumpAccount::new(m, state.n_scale(), t0, controls.record_counting);
    let mut tracker = if controls.track_martingale {
        Some(MartingaleTracker::new(
            plan_for(m)?,
            model,
            &state,
            reference.map(|r| r.coarse_at(t0)),
        ))
    } else {
        None
    };
    let mut gap_acc = reference.map(|_| [0, 1].map(|_| MixedNormAccumulator::new(NormMode::Sampled, t0)));
    let mut initial_gap = None;
    if let (Some(r), Some(acc)) = (reference, gap_acc.as_mut()) {
        let g = r.gap(&state, t0);
        initial_gap = Some([g[0].0, g[1].0]);
        for (a, (h, l)) in acc.iter_mut().zip(g) {
            a.push(t0, h, l)?;
        }
    }
    let mut log = controls.event_log.then(Vec::new);
    let mut samples = vec![snapshot(&state, &account, tracker.as_ref())];
    let mut events = 0u64;
    let mut absorbed_at = None;
    let mut mart_check_error: Option<f64> = tracker.as_ref().map(|_| 0.0);

    let mut k = 1usize;
    loop {
        let next_sample = (t0 + k as f64 * controls.sample_dt).min(controls.t_end);
        let total = state.total_rate();
        if total > controls.rate_budget {
            return Err(Error::RateOverflow {
                rate: total,
                budget: controls.rate_budget,
            });
        }
        let t_next = if total > 0.0 {
            state.t + waiting_time(total, rng)
        } else {
            if absorbed_at.is_none() {
                absorbed_at = Some(state.t);
            }
            f64::INFINITY
        };
        if t_next < next_sample {
            let ev = fire(&mut state, model, &mut account, tracker.as_mut(), t_next, rng);
            if let Some(l) = log.as_mut() {
                l.push(ev);
            }
            events += 1;
            continue;
        }

        account.advance(&state, next_sample);
        state.t = next_sample;
        if let Some(tr) = tracker.as_mut() {
            tr.advance(next_sample);
            let err = Species::BOTH
                .map(|s| (tr.martingale(s) - &tr.recomputed_martingale(&state, s)).max_abs())
                .into_iter()
                .fold(0.0, f64::max);
            mart_check_error = mart_check_error.map(|e| e.max(err));
        }
        if let (Some(r), Some(acc)) = (reference, gap_acc.as_mut()) {
            for (a, (h, l)) in acc.iter_mut().zip(r.gap(&state, next_sample)) {
                a.push(next_sample, h, l)?;
            }
            if let Some(tr) = tracker.as_mut() {
                tr.set_reference(&state, &r.coarse_at(next_sample));
            }
        }
        samples.push(snapshot(&state, &account, tracker.as_ref()));
        if next_sample >= controls.t_end {
            break;
        }
        k += 1;
    }

    let t_end = controls.t_end;
    let martingale = tracker.as_mut().map(|tr| tr.finish(t_end));
    let mart_final = tracker
        .as_ref()
        .map(|tr| Species::BOTH.map(|s| tr.martingale(s).clone()));
    Ok(PathTrace {
        replica,
        m,
        n_scale: state.n_scale(),
        t_end,
        samples,
        account,
        events,
        absorbed_at,
        approximate: false,
        martingale,
        mart_final,
        mart_check_error,
        gap: gap_acc.map(|a| a.map(|x| x.value())),
        initial_gap,
        event_log: log,
        leap_attempts: 0,
        leap_rejections: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeapControls {
    /// Largest leap.
    pub dt: f64,
    /// Leaps shrink so that no channel expects more than this many events.
    pub max_expected: f64,
    /// Leap rejection fraction above which the run fails.
    pub max_rejection_rate: f64,
}

impl Default for LeapControls {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            max_expected: 10.0,
            max_rejection_rate: 0.01,
        }
    }
}

fn poisson(lambda: f64, rng: &mut impl Rng) -> u64 {
    if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
    } else {
        0
    }
}

/// Approximate simulation by Poisson leaps; rates are frozen over each leap.
///
/// Each motion channel moves its whole batch from one site to the neighbour,
/// so mass is conserved leap by leap. A leap that would drive a count
/// negative is halved and redrawn.
pub fn tau_leap_run(
    state: ParticleState,
    model: &RateModel,
    controls: &RunControls,
    leap: &LeapControls,
    replica: u64,
    rng: &mut impl Rng,
) -> Result<PathTrace> {
    let mut state = state;
    let t0 = state.t;
    check_controls(controls, t0)?;
    if !(leap.dt > 0.0 && leap.max_expected > 0.0) {
        return Err(Error::Config("leap dt and cap must be positive".into()));
    }
    let m = state.m();
    let mut account = JumpAccount::new(m, state.n_scale(), t0, false);
    let mut samples = vec![snapshot(&state, &account, None)];
    let (mut attempts, mut rejections) = (0u64, 0u64);
    let mut absorbed_at = None;
    let mut fired = vec![[0u64; 8]; m];

    let mut k = 1usize;
    while state.t < controls.t_end {
        let next_sample = (t0 + k as f64 * controls.sample_dt).min(controls.t_end);
        let total = state.total_rate();
        if total > controls.rate_budget {
            return Err(Error::RateOverflow {
                rate: total,
                budget: controls.rate_budget,
            });
        }
        if total == 0.0 && absorbed_at.is_none() {
            absorbed_at = Some(state.t);
        }
        let max_rate = (0..m)
            .flat_map(|j| state.rates(j).iter().copied())
            .fold(0.0, f64::max);
        let mut h = leap.dt.min(next_sample - state.t);
        if max_rate * h > leap.max_expected {
            h = leap.max_expected / max_rate;
        }
        loop {
            attempts += 1;
            let mut ok = true;
            for (j, f) in fired.iter_mut().enumerate() {
                let r = state.rates(j);
                for (slot_k, n) in f.iter_mut().enumerate() {
                    *n = poisson(r[slot_k] * h, rng);
                }
                for s in Species::BOTH {
                    let out = f[slot(s, EventKind::Right)] + f[slot(s, EventKind::Left)] + f[slot(s, EventKind::Death)];
                    if out > state.counts(s)[j] {
                        ok = false;
                    }
                }
            }
            if ok {
                break;
            }
            rejections += 1;
            h *= 0.5;
        }

        account.advance(&state, state.t + h);
        let mut counts = [state.counts(Species::U).to_vec(), state.counts(Species::V).to_vec()];
        for (j, f) in fired.iter().enumerate() {
            for s in Species::BOTH {
                let c = &mut counts[s.index()];
                let right = f[slot(s, EventKind::Right)];
                let left = f[slot(s, EventKind::Left)];
                let birth = f[slot(s, EventKind::Birth)];
                let death = f[slot(s, EventKind::Death)];
                c[j] -= right + left + death;
                c[(j + 1) % m] += right;
                c[(j + m - 1) % m] += left;
                c[j] += birth;
                account.add_jumps(TransitionClass::of(s, EventKind::Birth).unwrap(), birth);
                account.add_jumps(TransitionClass::of(s, EventKind::Death).unwrap(), death);
            }
        }
        let t_new = state.t + h;
        let [u, v] = counts;
        state.set_counts(model, u, v);
        let reached = (next_sample - t_new).abs() <= 1e-12 * next_sample.abs().max(1.0);
        state.t = if reached { next_sample } else { t_new };
        if reached {
            samples.push(snapshot(&state, &account, None));
            k += 1;
        }
    }
    if attempts > 0 {
        let rate = rejections as f64 / attempts as f64;
        if rate > leap.max_rejection_rate {
            return Err(Error::LeapRejected { rate });
        }
    }
    Ok(PathTrace {
        replica,
        m,
        n_scale: state.n_scale(),
        t_end: controls.t_end,
        samples,
        account,
        events: 0,
        absorbed_at,
        approximate: true,
        martingale: None,
        mart_final: None,
        mart_check_error: None,
        gap: None,
        initial_gap: None,
        event_log: None,
        leap_attempts: attempts,
        leap_rejections: rejections,
    })
}
