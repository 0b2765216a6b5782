//! Convergence studies: particle gap against the fine reference over an
//! `(M, N)` grid, and semi-discrete error against the reference over `M`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::Stat;
use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::interp::{prolong, restrict, InterpNorms, MixedNormAccumulator, NormMode, TorusFn};
use crate::particle::{init_particles, run, ReferenceTarget, RunControls};
use crate::rng::replica_rng;
use crate::semidiscrete::{integrate, plan_for, SemiDiscreteState};

use super::config::ExperimentConfig;
use super::fit::{fit_loglog, SlopeFit};

/// Random stream of replica `r` in cell `c`.
pub fn stream_id(cell: usize, replica: u64) -> u64 {
    ((cell as u64) << 32) | replica
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub m: usize,
    pub n: u64,
    /// Set when the cell was abandoned, e.g. on rate overflow.
    pub skipped: Option<String>,
    /// `|||π_M U − u|||²_T + |||π_M V − v|||²_T` over replicas.
    pub gap: Stat,
    /// `D₀`: initial `H⁻¹` gap of both species.
    pub initial_gap: Stat,
    /// `sup_t ‖𝓜_i‖²_{-1,M}` per species.
    pub sup_mart_sq: [Stat; 2],
    pub rhs_functional: Stat,
    pub events: Stat,
    /// Largest incremental-versus-recomputed martingale discrepancy.
    pub mart_check_error: f64,
    #[serde(skip)]
    pub gaps: Vec<f64>,
    #[serde(skip)]
    pub sup_mart_sq1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config_hash: String,
    pub norm_mode: NormMode,
    pub t_end: f64,
    pub cells: Vec<CellResult>,
    /// Per fixed `M`: gap against `N`.
    pub slopes_n: Vec<(usize, SlopeFit)>,
    /// Per fixed `M`: `sup ‖𝓜₁‖²` against `N`.
    pub mart_slopes_n: Vec<(usize, SlopeFit)>,
    /// At the largest `N`: gap against `M`.
    pub slope_m: Option<SlopeFit>,
    pub reference_error: Option<ReferenceError>,
}

impl ConvergenceReport {
    pub fn cell(&self, m: usize, n: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.m == m && c.n == n)
    }

    pub fn slope_n(&self, m: usize) -> Option<&SlopeFit> {
        self.slopes_n.iter().find(|(mm, _)| *mm == m).map(|(_, f)| f)
    }

    pub fn mart_slope_n(&self, m: usize) -> Option<&SlopeFit> {
        self.mart_slopes_n.iter().find(|(mm, _)| *mm == m).map(|(_, f)| f)
    }

    /// Ratios of successive `𝔼 sup ‖𝓜₁‖²` along the `N` grid at fixed `M`.
    pub fn mart_ratios(&self, m: usize) -> Vec<f64> {
        let cells: Vec<&CellResult> = self
            .cells
            .iter()
            .filter(|c| c.m == m && c.skipped.is_none())
            .collect();
        cells
            .windows(2)
            .map(|w| w[1].sup_mart_sq[0].mean / w[0].sup_mart_sq[0].mean)
            .collect()
    }
}

struct ReplicaOutcome {
    gap: f64,
    initial_gap: f64,
    sup_mart_sq: [f64; 2],
    rhs: f64,
    events: f64,
    mart_check_error: f64,
}

/// Runs every `(m, n)` cell of the configuration; replicas run in parallel
/// on the current rayon pool.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let model = cfg.rate_model()?;
    let reference = cfg.reference_solution(&model)?;
    let initial = cfg.initial.particle_condition()?;
    let kmax = cfg.kmax();
    let controls = RunControls {
        t_end: cfg.t_end,
        sample_dt: cfg.sample_dt,
        rate_budget: cfg.rate_budget,
        track_martingale: true,
        record_counting: false,
        event_log: false,
    };
    let mut base_target: Option<ReferenceTarget> = None;
    let mut cells = Vec::new();
    let mut cell_index = 0;
    for &m in &cfg.m_grid {
        let target = match &base_target {
            None => ReferenceTarget::new(reference.clone(), m, kmax)?,
            Some(t) => t.with_m(m)?,
        };
        if base_target.is_none() {
            base_target = Some(target.clone());
        }
        for &n in &cfg.n_grid {
            let cell = cell_index;
            cell_index += 1;
            let outcomes: Vec<Result<ReplicaOutcome>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replica_rng(cfg.seed, stream_id(cell, r));
                    let state = init_particles(&model, &initial, m, n, &mut rng)?;
                    let trace = run(state, &model, &controls, Some(&target), r, &mut rng)?;
                    let mg = trace.martingale.clone().unwrap_or_default();
                    let gap = match cfg.norm_mode {
                        NormMode::Sampled => trace.total_gap().unwrap_or(0.0),
                        NormMode::EventExact => mg.discrete_gap[0] + mg.discrete_gap[1],
                    };
                    Ok(ReplicaOutcome {
                        gap,
                        initial_gap: trace.initial_gap.map(|g| g[0] + g[1]).unwrap_or(0.0),
                        sup_mart_sq: mg.sup_mart_sq,
                        rhs: mg.rhs_functional,
                        events: trace.events as f64,
                        mart_check_error: trace.mart_check_error.unwrap_or(0.0),
                    })
                })
                .collect();
            cells.push(summarise_cell(m, n, outcomes)?);
        }
    }

    let mut slopes_n = Vec::new();
    let mut mart_slopes_n = Vec::new();
    for &m in &cfg.m_grid {
        let row: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.m == m && c.skipped.is_none())
            .collect();
        let x: Vec<f64> = row.iter().map(|c| c.n as f64).collect();
        let gaps: Vec<Vec<f64>> = row.iter().map(|c| c.gaps.clone()).collect();
        if let Some(fit) = fit_loglog(&x, &gaps, cfg.seed) {
            slopes_n.push((m, fit));
        }
        let marts: Vec<Vec<f64>> = row.iter().map(|c| c.sup_mart_sq1.clone()).collect();
        if let Some(fit) = fit_loglog(&x, &marts, cfg.seed) {
            mart_slopes_n.push((m, fit));
        }
    }
    let slope_m = cfg.n_grid.iter().max().and_then(|&n| {
        let col: Vec<&CellResult> = cells
            .iter()
            .filter(|c| c.n == n && c.skipped.is_none())
            .collect();
        let x: Vec<f64> = col.iter().map(|c| c.m as f64).collect();
        let gaps: Vec<Vec<f64>> = col.iter().map(|c| c.gaps.clone()).collect();
        fit_loglog(&x, &gaps, cfg.seed)
    });
    Ok(ConvergenceReport {
        reference_error: reference_error_with(cfg, &model, &reference)?,
        config_hash: cfg.hash(),
        norm_mode: cfg.norm_mode,
        t_end: cfg.t_end,
        cells,
        slopes_n,
        mart_slopes_n,
        slope_m,
    })
}

fn summarise_cell(m: usize, n: u64, outcomes: Vec<Result<ReplicaOutcome>>) -> Result<CellResult> {
    let mut ok = Vec::with_capacity(outcomes.len());
    let mut skipped = None;
    for o in outcomes {
        match o {
            Ok(r) => ok.push(r),
            Err(e @ Error::RateOverflow { .. }) => {
                skipped.get_or_insert_with(|| e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    if skipped.is_some() {
        ok.clear();
    }
    let col = |f: &dyn Fn(&ReplicaOutcome) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
    let gaps = col(&|r| r.gap);
    let sup1 = col(&|r| r.sup_mart_sq[0]);
    Ok(CellResult {
        m,
        n,
        skipped,
        gap: Stat::of(&gaps),
        initial_gap: Stat::of(&col(&|r| r.initial_gap)),
        sup_mart_sq: [Stat::of(&sup1), Stat::of(&col(&|r| r.sup_mart_sq[1]))],
        rhs_functional: Stat::of(&col(&|r| r.rhs)),
        events: Stat::of(&col(&|r| r.events)),
        mart_check_error: ok.iter().map(|r| r.mart_check_error).fold(0.0, f64::max),
        gaps,
        sup_mart_sq1: sup1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdRow {
    pub m: usize,
    /// Mixed-norm error of both species.
    pub error: f64,
    pub error_u: f64,
    pub error_v: f64,
    /// `‖π_M u^M(0) − u(0)‖²_{H⁻¹}` summed over species.
    pub initial_gap: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdReport {
    pub config_hash: String,
    pub m_ref: usize,
    pub matched_initial: bool,
    pub rows: Vec<SdRow>,
    /// `log error` against `log M`.
    pub slope_m: Option<f64>,
    pub strictly_decreasing: bool,
    pub reference_error: Option<ReferenceError>,
}

/// Semi-discrete error `|||π_M u^M − u|||²_T + |||π_M v^M − v|||²_T` against
/// the fine reference for each `M`, trapezoid in time over sample times.
///
/// With `matched_initial` the coarse data are the grid values of the initial
/// densities; otherwise they are sampled at cell midpoints.
pub fn run_semidiscrete_convergence(cfg: &ExperimentConfig) -> Result<SdReport> {
    cfg.validate()?;
    let model = cfg.rate_model()?;
    let reference = cfg.reference_solution(&model)?;
    let (u0, v0) = cfg.initial.fields()?;
    let m_ref = reference.m_ref;
    let norms = InterpNorms::new(plan_for(m_ref)?, cfg.kmax());
    let ctx = SdContext {
        cfg,
        model: &model,
        reference: &reference,
        norms: &norms,
        u0: &u0,
        v0: &v0,
    };

    let rows = cfg
        .m_grid
        .par_iter()
        .map(|&m| ctx.row(m, cfg.matched_initial))
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = rows.windows(2).all(|w| w[1].error < w[0].error);
    let slope_m = if rows.len() >= 2 && rows.iter().all(|r| r.error > 0.0) {
        let x: Vec<f64> = rows.iter().map(|r| (r.m as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.error.ln()).collect();
        Some(crate::analytics::ols(&x, &y).1)
    } else {
        None
    };
    Ok(SdReport {
        config_hash: cfg.hash(),
        m_ref,
        matched_initial: cfg.matched_initial,
        rows,
        slope_m,
        strictly_decreasing,
        reference_error: ctx.reference_error()?,
    })
}

/// Estimated error of the fine reference itself, by Richardson
/// extrapolation from runs at `m_ref/4` and `m_ref/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceError {
    /// Mixed-norm error of the `m_ref/2` run against the reference.
    pub half_grid_error: f64,
    pub quarter_grid_error: f64,
    /// `log₂(quarter / half)`.
    pub observed_order: f64,
    /// `half / (2^order − 1)`.
    pub estimate: f64,
}

struct SdContext<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a crate::model::RateModel,
    reference: &'a crate::semidiscrete::ReferenceSolution,
    norms: &'a InterpNorms,
    u0: &'a TorusFn,
    v0: &'a TorusFn,
}

impl SdContext<'_> {
    fn row(&self, m: usize, matched: bool) -> Result<SdRow> {
        let m_ref = self.reference.m_ref;
        let (cu, cv) = if matched {
            (restrict(self.u0, m), restrict(self.v0, m))
        } else {
            let h = 0.5 / m as f64;
            let shift = |f: &TorusFn| GridFn::from_fn(m, |x| f.eval(x + h));
            (shift(self.u0), shift(self.v0))
        };
        let state0 = SemiDiscreteState::new(cu, cv, 0.0)?;
        let traj = integrate(&state0, self.model, self.cfg.t_end, &self.cfg.integrate_controls())?;
        let mut acc = [0, 1].map(|_| MixedNormAccumulator::new(NormMode::Sampled, 0.0));
        let mut initial_gap = 0.0;
        for s in &traj.samples {
            let i = self.reference.index_at(s.t);
            if (self.reference.times[i] - s.t).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "reference has no snapshot at t = {}; sample_dt must match",
                    s.t
                )));
            }
            let refs = [self.reference.u_at(i), self.reference.v_at(i)];
            for (k, (a, coarse)) in acc.iter_mut().zip([&s.u, &s.v]).enumerate() {
                let d = &prolong(coarse, m_ref) - &refs[k];
                let hm1 = self.norms.hm1_sq(&d);
                if s.t == 0.0 {
                    initial_gap += hm1;
                }
                a.push(s.t, hm1, self.norms.l2_sq(&d))?;
            }
        }
        let [eu, ev] = acc.map(|a| a.value());
        Ok(SdRow {
            m,
            error: eu + ev,
            error_u: eu,
            error_v: ev,
            initial_gap,
            steps: traj.diagnostics.steps,
        })
    }

    fn reference_error(&self) -> Result<Option<ReferenceError>> {
        let m_ref = self.reference.m_ref;
        if m_ref % 4 != 0 || m_ref < 8 {
            return Ok(None);
        }
        let half = self.row(m_ref / 2, true)?.error;
        let quarter = self.row(m_ref / 4, true)?.error;
        if !(half > 0.0 && quarter > half) {
            return Ok(Some(ReferenceError {
                half_grid_error: half,
                quarter_grid_error: quarter,
                observed_order: f64::NAN,
                estimate: half,
            }));
        }
        let order = (quarter / half).log2();
        Ok(Some(ReferenceError {
            half_grid_error: half,
            quarter_grid_error: quarter,
            observed_order: order,
            estimate: half / (2f64.powf(order) - 1.0),
        }))
    }
}

/// Reference error estimate for a configuration, as reported by both studies.
pub fn reference_error(cfg: &ExperimentConfig) -> Result<Option<ReferenceError>> {
    let model = cfg.rate_model()?;
    let reference = cfg.reference_solution(&model)?;
    reference_error_with(cfg, &model, &reference)
}

fn reference_error_with(
    cfg: &ExperimentConfig,
    model: &crate::model::RateModel,
    reference: &crate::semidiscrete::ReferenceSolution,
) -> Result<Option<ReferenceError>> {
    let (u0, v0) = cfg.initial.fields()?;
    let norms = InterpNorms::new(plan_for(reference.m_ref)?, cfg.kmax());
    SdContext {
        cfg,
        model,
        reference,
        norms: &norms,
        u0: &u0,
        v0: &v0,
    }
    .reference_error()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{FieldSpec, InitialSpec, Sampling};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            t_end: 0.05,
            m_grid: vec![4, 8],
            n_grid: vec![8, 16],
            replicas: 4,
            sample_dt: 0.025,
            reference: crate::harness::config::ReferenceSpec {
                m_ref: 32,
                snapshot: None,
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_data_gives_zero_error() {
        let cfg = ExperimentConfig {
            initial: InitialSpec {
                u0: FieldSpec::Constant { value: 0.0 },
                v0: FieldSpec::Constant { value: 0.0 },
                sampling: Sampling::Deterministic,
            },
            ..small_config()
        };
        let rep = run_convergence(&cfg).unwrap();
        assert_eq!(rep.cells.len(), 4);
        for c in &rep.cells {
            assert_eq!(c.gap.mean, 0.0);
            assert_eq!(c.events.mean, 0.0);
        }
    }

    #[test]
    fn convergence_is_reproducible() {
        let cfg = small_config();
        let a = run_convergence(&cfg).unwrap();
        let b = run_convergence(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.cells.iter().all(|c| c.gap.mean > 0.0 && c.mart_check_error < 1e-9));
        assert_eq!(a.slopes_n.len(), 2);
    }

    #[test]
    fn overflowing_cells_are_skipped() {
        let cfg = ExperimentConfig {
            rate_budget: 1e3,
            ..small_config()
        };
        let rep = run_convergence(&cfg).unwrap();
        assert!(rep.cells.iter().all(|c| c.skipped.is_some()));
        assert!(rep.slopes_n.is_empty());
    }

    #[test]
    fn semidiscrete_at_reference_size_is_exact() {
        let cfg = ExperimentConfig {
            m_grid: vec![8, 16, 32],
            ..small_config()
        };
        let rep = run_semidiscrete_convergence(&cfg).unwrap();
        assert_eq!(rep.rows.last().unwrap().error, 0.0);
        let re = rep.reference_error.as_ref().unwrap();
        assert!(re.quarter_grid_error > re.half_grid_error && re.half_grid_error > 0.0);
        assert!(re.estimate > 0.0 && re.estimate < re.half_grid_error);
        assert!(rep.strictly_decreasing, "{:?}", rep.rows);
    }

    #[test]
    fn perturbed_initial_data_register() {
        let cfg = ExperimentConfig {
            m_grid: vec![8],
            matched_initial: false,
            ..small_config()
        };
        let rep = run_semidiscrete_convergence(&cfg).unwrap();
        let row = &rep.rows[0];
        assert!(row.initial_gap > 0.0);
        // The H⁻¹ part of the error is at least the initial gap.
        assert!(row.error >= 0.5 * row.initial_gap);
    }
}
