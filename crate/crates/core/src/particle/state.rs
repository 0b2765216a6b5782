//! Occupation counts, per-site event rates and event selection.
//!
//! Rates are site aggregated: with `n` individuals of species 1 at site `j`
//! (density `U_j = n/N`), each individual jumps to either neighbour at rate
//! `M² μ₁(V_j)`, so the site fires each move at rate `M² n μ₁(V_j)`; births
//! fire at `n b₁(U_j, V_j)` and deaths at `n d₁(U_j, V_j)`. Species 2 moves
//! with `μ₂(U_j)`.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::interp::TorusFn;
use crate::model::{RateModel, Species};

use super::sumtree::SumTree;

/// Kinds of transition at a site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Right,
    Left,
    Birth,
    Death,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [EventKind::Right, EventKind::Left, EventKind::Birth, EventKind::Death];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            EventKind::Right => 0,
            EventKind::Left => 1,
            EventKind::Birth => 2,
            EventKind::Death => 3,
        }
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Slot of `(species, kind)` in a site's rate row.
#[inline]
pub fn slot(species: Species, kind: EventKind) -> usize {
    4 * species.index() + kind.index()
}

/// One realised transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub species: Species,
    pub kind: EventKind,
    pub site: usize,
}

impl Event {
    /// Site gaining an individual for moves.
    pub fn target(&self, m: usize) -> usize {
        match self.kind {
            EventKind::Right => (self.site + 1) % m,
            EventKind::Left => (self.site + m - 1) % m,
            _ => self.site,
        }
    }
}

/// How initial counts are produced from densities.
#[derive(Clone, Debug)]
pub enum InitialCondition {
    /// `n_j = round(N u₀(x_j))`.
    Deterministic { u0: TorusFn, v0: TorusFn },
    /// `n_j ~ Poisson(N u₀(x_j))`, independent over sites and species.
    Poisson { u0: TorusFn, v0: TorusFn },
    /// Explicit counts.
    Counts { u: Vec<u64>, v: Vec<u64> },
}

/// Rate row of one site: `[U right, U left, U birth, U death, V ...]`.
pub type RateRow = [f64; 8];

pub fn site_rates(model: &RateModel, m: usize, n_scale: u64, nu: u64, nv: u64) -> RateRow {
    let m2 = (m * m) as f64;
    let n = n_scale as f64;
    let (uu, vv) = (nu as f64 / n, nv as f64 / n);
    let mut row = [0.0; 8];
    for (s, count) in [(Species::U, nu), (Species::V, nv)] {
        if count == 0 {
            continue;
        }
        let c = count as f64;
        let other = match s {
            Species::U => vv,
            Species::V => uu,
        };
        let mv = (m2 * c * model.mu(s, other)).max(0.0);
        row[slot(s, EventKind::Right)] = mv;
        row[slot(s, EventKind::Left)] = mv;
        row[slot(s, EventKind::Birth)] = (c * model.birth(s, uu, vv)).max(0.0);
        row[slot(s, EventKind::Death)] = (c * model.death(s, uu, vv)).max(0.0);
    }
    row
}

/// Updates between full rebuilds of the cached sums.
const REBUILD_EVERY: u64 = 1 << 16;

/// Integer occupation state with cached rates.
#[derive(Clone, Debug)]
pub struct ParticleState {
    m: usize,
    n_scale: u64,
    counts: [Vec<u64>; 2],
    pub t: f64,
    rates: Vec<RateRow>,
    tree: SumTree,
    /// Σ_j over sites of each rate slot.
    slot_totals: RateRow,
    updates: u64,
}

impl ParticleState {
    pub fn from_counts(model: &RateModel, n_scale: u64, u: Vec<u64>, v: Vec<u64>) -> Result<Self> {
        let m = u.len();
        if m < 2 {
            return Err(Error::TooFewSites(m));
        }
        if v.len() != m {
            return Err(Error::SizeMismatch {
                expected: m,
                got: v.len(),
            });
        }
        if n_scale == 0 {
            return Err(Error::Config("population scale N must be positive".into()));
        }
        let mut s = Self {
            m,
            n_scale,
            counts: [u, v],
            t: 0.0,
            rates: vec![[0.0; 8]; m],
            tree: SumTree::new(m),
            slot_totals: [0.0; 8],
            updates: 0,
        };
        s.rebuild(model);
        Ok(s)
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn n_scale(&self) -> u64 {
        self.n_scale
    }

    pub fn counts(&self, s: Species) -> &[u64] {
        &self.counts[s.index()]
    }

    pub fn total_count(&self, s: Species) -> u64 {
        self.counts[s.index()].iter().sum()
    }

    /// `count / N` per site.
    pub fn density(&self, s: Species) -> GridFn {
        let n = self.n_scale as f64;
        GridFn::new(self.counts[s.index()].iter().map(|&c| c as f64 / n).collect())
    }

    #[inline]
    pub fn rates(&self, site: usize) -> &RateRow {
        &self.rates[site]
    }

    #[inline]
    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    /// Summed rate of `(species, kind)` over all sites.
    #[inline]
    pub fn slot_total(&self, s: Species, kind: EventKind) -> f64 {
        self.slot_totals[slot(s, kind)]
    }

    /// Recomputes every rate and cached sum from the counts.
    pub fn rebuild(&mut self, model: &RateModel) {
        self.slot_totals = [0.0; 8];
        let mut leaves = Vec::with_capacity(self.m);
        for j in 0..self.m {
            let row = site_rates(model, self.m, self.n_scale, self.counts[0][j], self.counts[1][j]);
            for (t, r) in self.slot_totals.iter_mut().zip(&row) {
                *t += r;
            }
            leaves.push(row.iter().sum());
            self.rates[j] = row;
        }
        self.tree = SumTree::from_weights(&leaves);
        self.updates = 0;
    }

    /// Replaces all counts and rebuilds the rate caches.
    pub fn set_counts(&mut self, model: &RateModel, u: Vec<u64>, v: Vec<u64>) {
        assert!(u.len() == self.m && v.len() == self.m, "grid size mismatch");
        self.counts = [u, v];
        self.rebuild(model);
    }

    fn refresh_site(&mut self, model: &RateModel, j: usize) {
        let row = site_rates(model, self.m, self.n_scale, self.counts[0][j], self.counts[1][j]);
        for k in 0..8 {
            self.slot_totals[k] += row[k] - self.rates[j][k];
        }
        self.rates[j] = row;
        self.tree.set(j, row.iter().sum());
    }

    /// Applies the count changes of `ev` and refreshes affected rates.
    pub fn apply(&mut self, model: &RateModel, ev: &Event) {
        let s = ev.species.index();
        let j = ev.site;
        match ev.kind {
            EventKind::Right | EventKind::Left => {
                let k = ev.target(self.m);
                self.counts[s][j] -= 1;
                self.counts[s][k] += 1;
                self.refresh_site(model, j);
                self.refresh_site(model, k);
            }
            EventKind::Birth => {
                self.counts[s][j] += 1;
                self.refresh_site(model, j);
            }
            EventKind::Death => {
                self.counts[s][j] -= 1;
                self.refresh_site(model, j);
            }
        }
        self.updates += 1;
        if self.updates >= REBUILD_EVERY {
            self.rebuild(model);
        }
    }

    /// Picks the next transition proportionally to the rates, given
    /// `x ∈ [0, total)`.
    pub fn select(&self, x: f64) -> (Species, EventKind, usize) {
        let (site, mut rem) = self.tree.find(x);
        let row = &self.rates[site];
        let mut chosen = None;
        for (k, &r) in row.iter().enumerate() {
            if r > 0.0 {
                chosen = Some(k);
                if rem < r {
                    break;
                }
                rem -= r;
            }
        }
        let k = chosen.expect("selected site has a positive rate");
        let species = if k < 4 { Species::U } else { Species::V };
        (species, EventKind::from_index(k % 4), site)
    }
}

/// Builds the initial state; Poisson draws come from `rng`.
pub fn init_particles(
    model: &RateModel,
    initial: &InitialCondition,
    m: usize,
    n_scale: u64,
    rng: &mut impl Rng,
) -> Result<ParticleState> {
    let n = n_scale as f64;
    let check = |x: f64| -> Result<f64> {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::Config(format!("initial density {x} must be finite and non-negative")));
        }
        Ok(x)
    };
    let (u, v) = match initial {
        InitialCondition::Counts { u, v } => (u.clone(), v.clone()),
        InitialCondition::Deterministic { u0, v0 } => {
            let mut out = [Vec::with_capacity(m), Vec::with_capacity(m)];
            for j in 0..m {
                let x = j as f64 / m as f64;
                out[0].push((n * check(u0.eval(x))?).round() as u64);
                out[1].push((n * check(v0.eval(x))?).round() as u64);
            }
            let [u, v] = out;
            (u, v)
        }
        InitialCondition::Poisson { u0, v0 } => {
            let mut out = [Vec::with_capacity(m), Vec::with_capacity(m)];
            for j in 0..m {
                let x = j as f64 / m as f64;
                for (o, f) in out.iter_mut().zip([u0, v0]) {
                    let lambda = n * check(f.eval(x))?;
                    let c = if lambda > 0.0 {
                        Poisson::new(lambda)
                            .map_err(|e| Error::Config(e.to_string()))?
                            .sample(rng) as u64
                    } else {
                        0
                    };
                    o.push(c);
                }
            }
            let [u, v] = out;
            (u, v)
        }
    };
    ParticleState::from_counts(model, n_scale, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_skt, SktParams};
    use crate::rng::replica_rng;

    fn unit_walk() -> RateModel {
        build_skt(&SktParams::conservative(1.0, 1.0, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn zero_state_has_zero_rate() {
        let s = ParticleState::from_counts(&unit_walk(), 10, vec![0; 4], vec![0; 4]).unwrap();
        assert_eq!(s.total_rate(), 0.0);
    }

    #[test]
    fn two_site_rates() {
        let s = ParticleState::from_counts(&unit_walk(), 1, vec![3, 1], vec![0, 0]).unwrap();
        assert_eq!(s.total_rate(), 32.0);
        assert_eq!(s.rates(0)[slot(Species::U, EventKind::Right)], 12.0);
        assert_eq!(s.rates(1)[slot(Species::U, EventKind::Left)], 4.0);
    }

    #[test]
    fn selection_frequencies() {
        let s = ParticleState::from_counts(&unit_walk(), 1, vec![3, 1], vec![0, 0]).unwrap();
        let mut rng = replica_rng(3, 0);
        let n = 100_000;
        let site0 = (0..n)
            .filter(|_| s.select(rng.random::<f64>() * s.total_rate()).2 == 0)
            .count();
        let p = 24.0 / 32.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((site0 as f64 - n as f64 * p).abs() < 3.0 * sd);
    }

    #[test]
    fn poisson_initialisation_statistics() {
        let model = unit_walk();
        let init = InitialCondition::Poisson {
            u0: TorusFn::constant(400.0),
            v0: TorusFn::constant(0.0),
        };
        let s = init_particles(&model, &init, 1000, 1, &mut replica_rng(1, 0)).unwrap();
        let mean = s.total_count(Species::U) as f64 / 1000.0;
        // Standard error of the mean of 1000 Poisson(400) draws is 20/√1000.
        assert!((mean - 400.0).abs() < 3.0 * 20.0 / 1000f64.sqrt());
    }

    #[test]
    fn deterministic_initialisation_rounds() {
        let init = InitialCondition::Deterministic {
            u0: TorusFn::sampler(|x| 0.2 + 0.1 * (2.0 * std::f64::consts::PI * x).sin()),
            v0: TorusFn::constant(0.25),
        };
        let s = init_particles(&unit_walk(), &init, 4, 100, &mut replica_rng(0, 0)).unwrap();
        assert_eq!(s.counts(Species::U), &[20, 30, 20, 10]);
        assert_eq!(s.counts(Species::V), &[25; 4]);
    }

    #[test]
    fn cached_rates_match_fresh_evaluation() {
        let model = build_skt(&SktParams {
            d1: 1.0,
            d2: 0.5,
            a1: 0.3,
            a2: 0.2,
            rho1: 1.0,
            rho2: 1.0,
            s11: 0.5,
            s12: 0.1,
            s21: 0.2,
            s22: 0.4,
        })
        .unwrap();
        let mut s = ParticleState::from_counts(&model, 8, vec![5; 6], vec![3; 6]).unwrap();
        let mut rng = replica_rng(4, 0);
        for _ in 0..5000 {
            if s.total_rate() == 0.0 {
                break;
            }
            let (species, kind, site) = s.select(rng.random::<f64>() * s.total_rate());
            s.apply(&model, &Event { t: 0.0, species, kind, site });
        }
        for j in 0..6 {
            let fresh = site_rates(&model, 6, 8, s.counts(Species::U)[j], s.counts(Species::V)[j]);
            assert_eq!(s.rates(j), &fresh);
        }
        let sum: f64 = (0..6).map(|j| s.rates(j).iter().sum::<f64>()).sum();
        assert!((s.total_rate() - sum).abs() < 1e-9 * sum);
    }
}
