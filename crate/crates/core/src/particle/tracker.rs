//! Online jump accounting and semi-martingale decomposition of a particle
//! path.
//!
//! Between events the state is constant, so every time integral here is exact:
//! the drift `φ` is integrated per site and the `-1` norms of the martingale
//! part evolve along straight lines in the field.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid::{GridFn, HMinusOneAccumulator, SpectralPlan};
use crate::interp::{MixedNormAccumulator, NormMode};
use crate::model::{RateModel, Species};

use super::state::{Event, EventKind, ParticleState};

/// Birth and death transitions of each species.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionClass {
    Births1,
    Deaths1,
    Births2,
    Deaths2,
}

impl TransitionClass {
    pub const ALL: [TransitionClass; 4] = [
        TransitionClass::Births1,
        TransitionClass::Deaths1,
        TransitionClass::Births2,
        TransitionClass::Deaths2,
    ];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            TransitionClass::Births1 => 0,
            TransitionClass::Deaths1 => 1,
            TransitionClass::Births2 => 2,
            TransitionClass::Deaths2 => 3,
        }
    }

    pub fn of(species: Species, kind: EventKind) -> Option<Self> {
        match (species, kind) {
            (Species::U, EventKind::Birth) => Some(TransitionClass::Births1),
            (Species::U, EventKind::Death) => Some(TransitionClass::Deaths1),
            (Species::V, EventKind::Birth) => Some(TransitionClass::Births2),
            (Species::V, EventKind::Death) => Some(TransitionClass::Deaths2),
            _ => None,
        }
    }

    pub fn species(self) -> Species {
        match self {
            TransitionClass::Births1 | TransitionClass::Deaths1 => Species::U,
            _ => Species::V,
        }
    }

    pub fn kind(self) -> EventKind {
        match self {
            TransitionClass::Births1 | TransitionClass::Births2 => EventKind::Birth,
            _ => EventKind::Death,
        }
    }
}

/// Jump counters `N_A` and cumulative intensities `I_A` for the four
/// birth/death classes.
///
/// `raw_intensity` is `∫ Σ_j n_j b(U_j, V_j) ds`, the compensator of the
/// counter; `intensity` divides by `M N`, i.e. `(1/M) ∫ Σ_j U_j b(U_j, V_j) ds`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpAccount {
    m: usize,
    n_scale: u64,
    t: f64,
    counts: [u64; 4],
    raw_intensity: [f64; 4],
    /// Per class: `(event time, raw intensity at that time)`.
    #[serde(skip)]
    records: Option<[Vec<(f64, f64)>; 4]>,
}

impl JumpAccount {
    pub fn new(m: usize, n_scale: u64, t0: f64, record: bool) -> Self {
        Self {
            m,
            n_scale,
            t: t0,
            counts: [0; 4],
            raw_intensity: [0.0; 4],
            records: record.then(Default::default),
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn count(&self, class: TransitionClass) -> u64 {
        self.counts[class.index()]
    }

    pub fn raw_intensity(&self, class: TransitionClass) -> f64 {
        self.raw_intensity[class.index()]
    }

    /// Intensity normalised by `M N`.
    pub fn intensity(&self, class: TransitionClass) -> f64 {
        self.raw_intensity[class.index()] / (self.m as f64 * self.n_scale as f64)
    }

    /// Counter jump times with the raw intensity at each, when recording.
    pub fn records(&self, class: TransitionClass) -> Option<&[(f64, f64)]> {
        self.records.as_ref().map(|r| r[class.index()].as_slice())
    }

    /// Integrates the current (constant) intensities up to `t_new`.
    pub fn advance(&mut self, state: &ParticleState, t_new: f64) {
        let dt = t_new - self.t;
        debug_assert!(dt >= 0.0);
        for class in TransitionClass::ALL {
            self.raw_intensity[class.index()] += dt * state.slot_total(class.species(), class.kind());
        }
        self.t = t_new;
    }

    /// Adds a batch of `k` simultaneous jumps of `class` (tau-leaping).
    pub fn add_jumps(&mut self, class: TransitionClass, k: u64) {
        self.counts[class.index()] += k;
    }

    /// Counts `ev` if it is a birth or death; call after [`advance`](Self::advance).
    pub fn record(&mut self, ev: &Event) {
        if let Some(class) = TransitionClass::of(ev.species, ev.kind) {
            let i = class.index();
            self.counts[i] += 1;
            if let Some(rec) = self.records.as_mut() {
                rec[i].push((ev.t, self.raw_intensity[i]));
            }
        }
    }
}

/// Per-species part of [`MartingaleTracker`].
#[derive(Clone, Debug)]
struct SpeciesTrack {
    initial: GridFn,
    /// `μ(other_j) · own_j`.
    flux: Vec<f64>,
    /// `φ_j = Δ_M(flux)_j + R(U_j, V_j)`.
    phi: Vec<f64>,
    /// `∫ φ_j ds` flushed up to `flushed_at[j]`.
    drift: Vec<f64>,
    flushed_at: Vec<f64>,
    mart: HMinusOneAccumulator,
    phi_acc: HMinusOneAccumulator,
    /// `Z = own − reference`.
    gap: HMinusOneAccumulator,
    gap_sq_sum: f64,
    gap_norm: MixedNormAccumulator,
    q: f64,
    jump_qv: f64,
    sup_mart_sq: f64,
    sup_abs_h: f64,
}

impl SpeciesTrack {
    fn h(&self) -> f64 {
        2.0 * self.q + self.jump_qv
    }

    fn note_sup(&mut self) {
        self.sup_mart_sq = self.sup_mart_sq.max(self.mart.norm_sq());
        self.sup_abs_h = self.sup_abs_h.max(self.h().abs());
    }

    fn push_gap(&mut self, t: f64) {
        let m = self.initial.m() as f64;
        self.gap_norm
            .push(t, self.gap.norm_sq(), self.gap_sq_sum / m)
            .expect("tracker time is monotone");
    }
}

/// Scalar results of a tracked path, per species.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSummary {
    /// `sup_{t≤T} ‖𝓜_i(t)‖²_{-1,M}`.
    pub sup_mart_sq: [f64; 2],
    pub final_mart_sq: [f64; 2],
    /// `sup_{t≤T} |H_i(t)|`.
    pub sup_abs_h: [f64; 2],
    pub h_final: [f64; 2],
    pub q_final: [f64; 2],
    pub jump_qv: [f64; 2],
    /// `(1/N) ∫₀ᵀ (1/M) Σ_j (1 + U_j² + V_j²) dt`.
    pub rhs_functional: f64,
    /// Event-exact `sup ‖Z_i‖²_{-1,M} + ∫ ‖Z_i‖²_{2,M}` against the reference.
    pub discrete_gap: [f64; 2],
}

/// Decomposition `U(t) = U(0) + ∫₀ᵗ φ(U, V) ds + 𝓜(t)` for both species,
/// together with `H_i = 2𝓠_i + Σ ‖Δ𝓜_i‖²_{-1,M}` where
/// `𝓠_i(t) = ∫ ⟨Z_i(s⁻), d𝓜_i(s)⟩_{-1,M}` and `Z_i` is the gap to a
/// reference held piecewise constant in time.
#[derive(Clone, Debug)]
pub struct MartingaleTracker {
    plan: Arc<SpectralPlan>,
    n_scale: u64,
    t: f64,
    tracks: [SpeciesTrack; 2],
    /// `Σ_j n_j²` per species.
    count_sq: [f64; 2],
    rhs_integral: f64,
    events: u64,
}

/// Events between full recomputations of the `-1` norm accumulators.
const REFRESH_EVERY: u64 = 1 << 14;

impl MartingaleTracker {
    /// Starts at `state.t`; `reference` defaults to the initial densities.
    pub fn new(
        plan: Arc<SpectralPlan>,
        model: &RateModel,
        state: &ParticleState,
        reference: Option<[GridFn; 2]>,
    ) -> Self {
        let m = state.m();
        assert_eq!(plan.m(), m, "plan and state sizes differ");
        let t = state.t;
        let dens = [state.density(Species::U), state.density(Species::V)];
        let reference = reference.unwrap_or_else(|| dens.clone());
        let tracks = Species::BOTH.map(|s| {
            let i = s.index();
            let gap = &dens[i] - &reference[i];
            let gap_sq_sum = gap.iter().map(|z| z * z).sum();
            let mut tr = SpeciesTrack {
                initial: dens[i].clone(),
                flux: vec![0.0; m],
                phi: vec![0.0; m],
                drift: vec![0.0; m],
                flushed_at: vec![t; m],
                mart: HMinusOneAccumulator::zero(plan.clone()),
                phi_acc: HMinusOneAccumulator::zero(plan.clone()),
                gap: HMinusOneAccumulator::new(plan.clone(), gap),
                gap_sq_sum,
                gap_norm: MixedNormAccumulator::new(NormMode::EventExact, t),
                q: 0.0,
                jump_qv: 0.0,
                sup_mart_sq: 0.0,
                sup_abs_h: 0.0,
            };
            tr.push_gap(t);
            tr
        });
        let count_sq = Species::BOTH.map(|s| state.counts(s).iter().map(|&c| (c as f64) * (c as f64)).sum());
        let mut tracker = Self {
            plan,
            n_scale: state.n_scale(),
            t,
            tracks,
            count_sq,
            rhs_integral: 0.0,
            events: 0,
        };
        tracker.rebuild_phi(model, state);
        tracker
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    fn rebuild_phi(&mut self, model: &RateModel, state: &ParticleState) {
        let m = state.m();
        for s in Species::BOTH {
            for j in 0..m {
                self.tracks[s.index()].flux[j] = flux_at(model, state, s, j);
            }
        }
        for s in Species::BOTH {
            let phi: Vec<f64> = (0..m).map(|j| phi_at(model, state, &self.tracks[s.index()].flux, s, j)).collect();
            let tr = &mut self.tracks[s.index()];
            tr.phi_acc.reset(GridFn::new(phi.clone()));
            tr.phi = phi;
        }
    }

    /// Flows the decomposition forward to `t_new` with the state frozen.
    pub fn advance(&mut self, t_new: f64) {
        let dt = t_new - self.t;
        debug_assert!(dt >= 0.0);
        if dt == 0.0 {
            return;
        }
        let n = self.n_scale as f64;
        let m = self.plan.m() as f64;
        self.rhs_integral += dt * (1.0 + (self.count_sq[0] + self.count_sq[1]) / (n * n * m));
        for tr in &mut self.tracks {
            // 𝓜 and 𝓠 are affine in t between jumps; |H| peaks at an end.
            let drift_pairing = tr.gap.inner(&tr.phi_acc);
            tr.q -= dt * drift_pairing;
            let phi_acc = tr.phi_acc.clone();
            tr.mart.axpy(-dt, &phi_acc);
            tr.note_sup();
        }
        self.t = t_new;
    }

    /// Accounts for `ev`, already applied to `state`; call after
    /// [`advance`](Self::advance) to `ev.t`.
    pub fn on_event(&mut self, model: &RateModel, state: &ParticleState, ev: &Event) {
        debug_assert_eq!(ev.t, self.t);
        let m = state.m();
        let inv_n = 1.0 / self.n_scale as f64;
        let si = ev.species.index();
        let mut delta: [(usize, f64); 2] = [(ev.site, 0.0); 2];
        let len = match ev.kind {
            EventKind::Right | EventKind::Left => {
                delta = [(ev.site, -inv_n), (ev.target(m), inv_n)];
                2
            }
            EventKind::Birth => {
                delta[0].1 = inv_n;
                1
            }
            EventKind::Death => {
                delta[0].1 = -inv_n;
                1
            }
        };
        let delta = &delta[..len];

        for &(j, a) in delta {
            let c = state.counts(ev.species)[j] as f64;
            let before = c - a * self.n_scale as f64;
            self.count_sq[si] += c * c - before * before;
        }

        let tr = &mut self.tracks[si];
        let cross: f64 = delta.iter().map(|&(j, a)| tr.gap.inner_site(j, a)).sum();
        let jump_sq = match delta {
            [(_, a)] => a * a * self.plan.site_norm_sq(),
            [(j, a), (k, b)] => self.plan.pair_norm_sq(*j, *a, *k, *b),
            _ => unreachable!(),
        };
        tr.q += cross;
        tr.jump_qv += jump_sq;
        for &(j, a) in delta {
            let z = tr.gap.field()[j];
            tr.gap_sq_sum += (z + a) * (z + a) - z * z;
        }
        tr.mart.increment(delta);
        tr.gap.increment(delta);
        tr.note_sup();
        tr.push_gap(self.t);

        // Flux of both species changes at the touched sites; φ at their
        // neighbourhoods.
        for s in Species::BOTH {
            for &(j, _) in delta {
                self.tracks[s.index()].flux[j] = flux_at(model, state, s, j);
            }
        }
        let mut sites: [usize; 6] = [usize::MAX; 6];
        let mut n_sites = 0;
        for &(j, _) in delta {
            for k in [j + m - 1, j, j + 1] {
                let k = k % m;
                if !sites[..n_sites].contains(&k) {
                    sites[n_sites] = k;
                    n_sites += 1;
                }
            }
        }
        let t = self.t;
        for s in Species::BOTH {
            for &k in &sites[..n_sites] {
                let new_phi = phi_at(model, state, &self.tracks[s.index()].flux, s, k);
                let tr = &mut self.tracks[s.index()];
                let old = tr.phi[k];
                if new_phi != old {
                    tr.drift[k] += old * (t - tr.flushed_at[k]);
                    tr.flushed_at[k] = t;
                    tr.phi[k] = new_phi;
                    tr.phi_acc.add_site(k, new_phi - old);
                }
            }
        }

        self.events += 1;
        if self.events % REFRESH_EVERY == 0 {
            for tr in &mut self.tracks {
                tr.mart.rebuild();
                tr.gap.rebuild();
                let phi = GridFn::new(tr.phi.clone());
                tr.phi_acc.reset(phi);
            }
        }
    }

    /// Switches the reference to `reference` at the current time.
    pub fn set_reference(&mut self, state: &ParticleState, reference: &[GridFn; 2]) {
        for s in Species::BOTH {
            let tr = &mut self.tracks[s.index()];
            let gap = &state.density(s) - &reference[s.index()];
            tr.gap_sq_sum = gap.iter().map(|z| z * z).sum();
            tr.gap.reset(gap);
            tr.push_gap(self.t);
        }
    }

    /// `∫₀ᵗ φ_i ds` with every site flushed to the current time.
    pub fn drift_integral(&self, s: Species) -> GridFn {
        let tr = &self.tracks[s.index()];
        GridFn::new(
            (0..tr.drift.len())
                .map(|j| tr.drift[j] + tr.phi[j] * (self.t - tr.flushed_at[j]))
                .collect(),
        )
    }

    /// Incrementally maintained `𝓜_i(t)`.
    pub fn martingale(&self, s: Species) -> &GridFn {
        self.tracks[s.index()].mart.field()
    }

    /// `𝓜_i(t)` recomputed as `U(t) − U(0) − ∫ φ`.
    pub fn recomputed_martingale(&self, state: &ParticleState, s: Species) -> GridFn {
        let tr = &self.tracks[s.index()];
        let mut out = &state.density(s) - &tr.initial;
        out -= &self.drift_integral(s);
        out
    }

    pub fn mart_norm_sq(&self, s: Species) -> f64 {
        self.tracks[s.index()].mart.norm_sq()
    }

    pub fn q(&self, s: Species) -> f64 {
        self.tracks[s.index()].q
    }

    pub fn jump_qv(&self, s: Species) -> f64 {
        self.tracks[s.index()].jump_qv
    }

    /// `H_i(t) = 2𝓠_i(t) + Σ ‖Δ𝓜_i‖²_{-1,M}`.
    pub fn h(&self, s: Species) -> f64 {
        self.tracks[s.index()].h()
    }

    /// Closes the time integrals at `t_end` and reports.
    pub fn finish(&mut self, t_end: f64) -> MartingaleSummary {
        self.advance(t_end);
        let mut out = MartingaleSummary {
            rhs_functional: self.rhs_integral / self.n_scale as f64,
            ..Default::default()
        };
        for (i, tr) in self.tracks.iter_mut().enumerate() {
            tr.gap_norm.finish(t_end).expect("tracker time is monotone");
            out.sup_mart_sq[i] = tr.sup_mart_sq;
            out.final_mart_sq[i] = tr.mart.norm_sq();
            out.sup_abs_h[i] = tr.sup_abs_h;
            out.h_final[i] = tr.h();
            out.q_final[i] = tr.q;
            out.jump_qv[i] = tr.jump_qv;
            out.discrete_gap[i] = tr.gap_norm.value();
        }
        out
    }
}

fn flux_at(model: &RateModel, state: &ParticleState, s: Species, j: usize) -> f64 {
    let n = state.n_scale() as f64;
    let own = state.counts(s)[j] as f64 / n;
    let other = match s {
        Species::U => state.counts(Species::V)[j],
        Species::V => state.counts(Species::U)[j],
    } as f64
        / n;
    model.mu(s, other) * own
}

fn phi_at(model: &RateModel, state: &ParticleState, flux: &[f64], s: Species, j: usize) -> f64 {
    let m = flux.len();
    let m2 = (m * m) as f64;
    let n = state.n_scale() as f64;
    let lap = m2 * (flux[(j + 1) % m] + flux[(j + m - 1) % m] - 2.0 * flux[j]);
    let u = state.counts(Species::U)[j] as f64 / n;
    let v = state.counts(Species::V)[j] as f64 / n;
    lap + model.reaction(s, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_skt, SktParams};
    use crate::particle::state::slot;
    use crate::rng::replica_rng;
    use rand::Rng;

    fn lv_model() -> RateModel {
        build_skt(&SktParams {
            d1: 1.0,
            d2: 0.5,
            a1: 0.3,
            a2: 0.2,
            rho1: 2.0,
            rho2: 1.5,
            s11: 0.5,
            s12: 0.2,
            s21: 0.1,
            s22: 0.4,
            ..Default::default()
        })
        .unwrap()
    }

    /// Drives a short SSA path by hand and returns the pieces.
    fn drive(
        model: &RateModel,
        m: usize,
        n: u64,
        steps: usize,
        seed: u64,
    ) -> (ParticleState, MartingaleTracker, JumpAccount, Vec<u64>) {
        let mut rng = replica_rng(seed, 0);
        let u: Vec<u64> = (0..m).map(|j| n + (j as u64 % 3) * n / 2).collect();
        let v: Vec<u64> = (0..m).map(|j| n / 2 + (j as u64 % 2) * n).collect();
        let mut state = ParticleState::from_counts(model, n, u, v).unwrap();
        let plan = crate::semidiscrete::plan_for(m).unwrap();
        let mut tracker = MartingaleTracker::new(plan, model, &state, None);
        let mut account = JumpAccount::new(m, n, 0.0, true);
        let totals0 = vec![state.total_count(Species::U), state.total_count(Species::V)];
        for _ in 0..steps {
            let total = state.total_rate();
            let tau = -(1.0 - rng.random::<f64>()).ln() / total;
            let t = state.t + tau;
            tracker.advance(t);
            account.advance(&state, t);
            state.t = t;
            let (species, kind, site) = state.select(rng.random::<f64>() * total);
            let ev = Event { t, species, kind, site };
            state.apply(model, &ev);
            account.record(&ev);
            tracker.on_event(model, &state, &ev);
        }
        (state, tracker, account, totals0)
    }

    #[test]
    fn martingale_matches_recomputation() {
        let model = lv_model();
        let (state, tracker, _, _) = drive(&model, 8, 20, 20_000, 3);
        for s in Species::BOTH {
            let inc = tracker.martingale(s);
            let fresh = tracker.recomputed_martingale(&state, s);
            let diff = (inc - &fresh).max_abs();
            assert!(diff < 1e-9, "{s:?}: {diff}");
            let plan = SpectralPlan::new(8).unwrap();
            let rel = (tracker.mart_norm_sq(s) - plan.norm_sq(inc)).abs() / plan.norm_sq(inc).max(1e-300);
            assert!(rel < 1e-9, "{rel}");
        }
    }

    #[test]
    fn h_is_twice_q_plus_jump_variation() {
        let model = lv_model();
        let (_, tracker, _, _) = drive(&model, 6, 10, 5000, 9);
        for s in Species::BOTH {
            assert_eq!(tracker.h(s), 2.0 * tracker.q(s) + tracker.jump_qv(s));
            assert!(tracker.jump_qv(s) > 0.0);
        }
    }

    #[test]
    fn count_identity_holds() {
        let model = lv_model();
        let (state, _, account, totals0) = drive(&model, 6, 10, 5000, 5);
        let du = state.total_count(Species::U) as i64 - totals0[0] as i64;
        let dv = state.total_count(Species::V) as i64 - totals0[1] as i64;
        assert_eq!(
            du,
            account.count(TransitionClass::Births1) as i64 - account.count(TransitionClass::Deaths1) as i64
        );
        assert_eq!(
            dv,
            account.count(TransitionClass::Births2) as i64 - account.count(TransitionClass::Deaths2) as i64
        );
        let rec = account.records(TransitionClass::Births1).unwrap();
        assert_eq!(rec.len() as u64, account.count(TransitionClass::Births1));
        assert!(rec.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn intensity_normalisation() {
        let model = lv_model();
        let state = ParticleState::from_counts(&model, 4, vec![4, 8], vec![0, 4]).unwrap();
        let mut account = JumpAccount::new(2, 4, 0.0, false);
        account.advance(&state, 0.5);
        let raw = 0.5 * state.slot_total(Species::U, EventKind::Birth);
        assert_eq!(account.raw_intensity(TransitionClass::Births1), raw);
        // (1/M) Σ U_j b₁(U_j, V_j) · t with U = (1, 2), V = (0, 1).
        let direct = 0.5 * 0.5 * (model.birth(Species::U, 1.0, 0.0) + 2.0 * model.birth(Species::U, 2.0, 1.0));
        assert!((account.intensity(TransitionClass::Births1) - direct).abs() < 1e-14);
        assert_eq!(state.rates(0)[slot(Species::U, EventKind::Birth)], 4.0 * model.birth(Species::U, 1.0, 0.0));
    }

    #[test]
    fn frozen_state_has_linear_martingale() {
        // No events: 𝓜(t) = −t φ and Q(t) = −t ⟨Z, φ⟩ with Z = 0.
        let model = lv_model();
        let state = ParticleState::from_counts(&model, 5, vec![5, 10, 0, 5], vec![0, 5, 5, 5]).unwrap();
        let plan = crate::semidiscrete::plan_for(4).unwrap();
        let mut tracker = MartingaleTracker::new(plan.clone(), &model, &state, None);
        tracker.advance(0.3);
        for s in Species::BOTH {
            let phi = tracker.drift_integral(s);
            let expect = &phi * -1.0;
            assert!((tracker.martingale(s) - &expect).max_abs() < 1e-14);
            assert_eq!(tracker.q(s), 0.0);
            assert!((tracker.mart_norm_sq(s) - plan.norm_sq(&expect)).abs() < 1e-12);
        }
    }
}
