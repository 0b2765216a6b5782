//! Deterministic semi-discrete system on the discrete torus:
//!
//! ```text
//! du/dt = Δ_M(μ₁(v) u) + u λ₁(u, v)
//! dv/dt = Δ_M(μ₂(u) v) + v λ₂(u, v)
//! ```
//!
//! integrated with the three-stage strong-stability-preserving Runge–Kutta
//! scheme under the step limit `dt ≤ c_cfl / (4M² sup μ + sup |λ|)`, which
//! makes every forward-Euler stage positivity preserving. Also provides the
//! linear Kolmogorov equation `dz/dt = Δ_M(μz + f) + x` with jumps and a
//! checker for its `H⁻¹` energy inequality.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{laplacian_apply, norm_p, GridFn, SpectralPlan};
use crate::interp::{restrict, TorusFn};
use crate::model::{check_smallness, smallness_threshold, RateModel, Species};

/// Densities of both species at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiDiscreteState {
    pub u: GridFn,
    pub v: GridFn,
    pub t: f64,
}

impl SemiDiscreteState {
    pub fn new(u: GridFn, v: GridFn, t: f64) -> Result<Self> {
        if u.m() != v.m() {
            return Err(Error::SizeMismatch {
                expected: u.m(),
                got: v.m(),
            });
        }
        if u.m() < 2 {
            return Err(Error::TooFewSites(u.m()));
        }
        Ok(Self { u, v, t })
    }

    pub fn from_fns(u0: &TorusFn, v0: &TorusFn, m: usize) -> Result<Self> {
        Self::new(restrict(u0, m), restrict(v0, m), 0.0)
    }

    pub fn m(&self) -> usize {
        self.u.m()
    }

    pub fn species(&self, s: Species) -> &GridFn {
        match s {
            Species::U => &self.u,
            Species::V => &self.v,
        }
    }
}

/// Step-size and positivity settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepControls {
    /// Fraction of the stability bound used for steps.
    pub c_cfl: f64,
    /// Values in `[-floor, 0)` are roundoff and clipped silently.
    pub floor: f64,
    /// Largest fraction of sites allowed to fall below `-floor` in a step
    /// before the step fails; such sites are clipped as well.
    pub max_clip_fraction: f64,
}

impl Default for StepControls {
    fn default() -> Self {
        Self {
            c_cfl: 0.9,
            floor: 1e-13,
            max_clip_fraction: 0.01,
        }
    }
}

/// `c_cfl / (4M² sup μ + sup |λ|)` at the given state.
pub fn stability_limit(state: &SemiDiscreteState, model: &RateModel, c_cfl: f64) -> f64 {
    let m = state.m() as f64;
    let mut mu_max: f64 = 0.0;
    let mut lam_max: f64 = 0.0;
    for (&u, &v) in state.u.iter().zip(state.v.iter()) {
        mu_max = mu_max
            .max(model.mu(Species::U, v).abs())
            .max(model.mu(Species::V, u).abs());
        lam_max = lam_max
            .max(model.growth(Species::U, u, v).abs())
            .max(model.growth(Species::V, u, v).abs());
    }
    let rate = 4.0 * m * m * mu_max + lam_max;
    if rate == 0.0 {
        f64::INFINITY
    } else {
        c_cfl / rate
    }
}

/// Right-hand side of the semi-discrete system.
pub fn rhs(u: &GridFn, v: &GridFn, model: &RateModel) -> (GridFn, GridFn) {
    let flux_u = u.zip_map(v, |a, b| model.mu(Species::U, b) * a);
    let flux_v = v.zip_map(u, |b, a| model.mu(Species::V, a) * b);
    let mut du = laplacian_apply(&flux_u);
    let mut dv = laplacian_apply(&flux_v);
    for j in 0..u.m() {
        du[j] += model.reaction(Species::U, u[j], v[j]);
        dv[j] += model.reaction(Species::V, u[j], v[j]);
    }
    (du, dv)
}

fn clip(fields: [&mut GridFn; 2], controls: &StepControls) -> Result<()> {
    let sites = fields[0].m() + fields[1].m();
    let mut clipped = 0;
    for g in fields {
        for x in g.values_mut() {
            if *x < 0.0 {
                if *x < -controls.floor {
                    clipped += 1;
                }
                *x = 0.0;
            }
        }
    }
    if clipped as f64 > controls.max_clip_fraction * sites as f64 {
        return Err(Error::NegativityFault { clipped, sites });
    }
    Ok(())
}

/// One SSP-RK3 step of length `dt`.
pub fn step(
    state: &SemiDiscreteState,
    model: &RateModel,
    dt: f64,
    controls: &StepControls,
) -> Result<SemiDiscreteState> {
    assert!(dt > 0.0, "step length must be positive");
    let limit = stability_limit(state, model, controls.c_cfl);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepRejected { dt, limit });
    }
    let (u0, v0) = (&state.u, &state.v);
    let euler = |u: &GridFn, v: &GridFn| {
        let (du, dv) = rhs(u, v, model);
        let mut u1 = u.clone();
        u1.axpy(dt, &du);
        let mut v1 = v.clone();
        v1.axpy(dt, &dv);
        (u1, v1)
    };
    let (u1, v1) = euler(u0, v0);
    let (u2e, v2e) = euler(&u1, &v1);
    let u2 = u0.zip_map(&u2e, |a, b| 0.75 * a + 0.25 * b);
    let v2 = v0.zip_map(&v2e, |a, b| 0.75 * a + 0.25 * b);
    let (u3e, v3e) = euler(&u2, &v2);
    let mut u3 = u0.zip_map(&u3e, |a, b| a / 3.0 + 2.0 * b / 3.0);
    let mut v3 = v0.zip_map(&v3e, |a, b| a / 3.0 + 2.0 * b / 3.0);
    clip([&mut u3, &mut v3], controls)?;
    Ok(SemiDiscreteState {
        u: u3,
        v: v3,
        t: state.t + dt,
    })
}

/// Settings for [`integrate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateControls {
    pub step: StepControls,
    /// Interval between recorded samples; the final time is always recorded.
    pub sample_dt: f64,
    /// Extra factor applied to the stability-limited step.
    pub dt_factor: f64,
}

impl Default for IntegrateControls {
    fn default() -> Self {
        Self {
            step: StepControls::default(),
            sample_dt: 0.01,
            dt_factor: 1.0,
        }
    }
}

/// Per-species run diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub rejected_steps: usize,
    /// `‖u₀‖_{1,M}` per species.
    pub initial_l1: [f64; 2],
    /// `sup_t ‖u(t)‖_{1,M}` per species.
    pub sup_l1: [f64; 2],
    /// `∫ [u λ⁻]_M dt` per species (trapezoid on accepted steps).
    pub loss_integral: [f64; 2],
    /// `(sup_t ‖u‖₁ + ∫[uλ⁻]) / (e^{ρ₀T} ‖u₀‖₁)`; zero for empty species.
    pub mass_envelope_ratio: [f64; 2],
    /// `sup_t ‖u(t)‖_∞` per species.
    pub sup_inf: [f64; 2],
    /// Largest `‖u(t)‖_∞ ‖v(t)‖_∞` over accepted steps and where it occurred.
    pub max_sup_product: f64,
    pub t_max_sup_product: f64,
}

/// Sampled trajectory plus diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<SemiDiscreteState>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn last(&self) -> &SemiDiscreteState {
        self.samples.last().expect("trajectory has at least one sample")
    }
}

fn loss_rate(state: &SemiDiscreteState, model: &RateModel) -> [f64; 2] {
    let m = state.m() as f64;
    let mut out = [0.0; 2];
    for (&u, &v) in state.u.iter().zip(state.v.iter()) {
        out[0] += u * (-model.growth(Species::U, u, v)).max(0.0);
        out[1] += v * (-model.growth(Species::V, u, v)).max(0.0);
    }
    [out[0] / m, out[1] / m]
}

/// Integrates to `t_end` with stability-limited steps that land exactly on
/// the sample times.
pub fn integrate(
    state0: &SemiDiscreteState,
    model: &RateModel,
    t_end: f64,
    controls: &IntegrateControls,
) -> Result<Trajectory> {
    for g in [&state0.u, &state0.v] {
        if g.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("initial densities must be finite and non-negative".into()));
        }
    }
    if !(controls.sample_dt > 0.0) {
        return Err(Error::Config("sample_dt must be positive".into()));
    }
    let t0 = state0.t;
    let mut diag = Diagnostics {
        initial_l1: [norm_p(&state0.u, 1.0), norm_p(&state0.v, 1.0)],
        ..Diagnostics::default()
    };
    diag.sup_l1 = diag.initial_l1;
    diag.sup_inf = [state0.u.max_abs(), state0.v.max_abs()];
    diag.max_sup_product = diag.sup_inf[0] * diag.sup_inf[1];
    diag.t_max_sup_product = t0;

    let mut samples = vec![state0.clone()];
    let mut state = state0.clone();
    let mut loss = loss_rate(&state, model);
    let mut k = 1usize;
    while state.t < t_end {
        let next_sample = (t0 + k as f64 * controls.sample_dt).min(t_end);
        let mut dt = controls.dt_factor * stability_limit(&state, model, controls.step.c_cfl);
        dt = dt.min(next_sample - state.t);
        let new_state = loop {
            match step(&state, model, dt, &controls.step) {
                Ok(s) => break s,
                Err(Error::StepRejected { .. }) if dt > 1e-300 => {
                    diag.rejected_steps += 1;
                    dt *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        let reached = (next_sample - new_state.t).abs() <= 1e-12 * next_sample.abs().max(1.0);
        state = new_state;
        if reached {
            state.t = next_sample;
        }
        diag.steps += 1;

        let new_loss = loss_rate(&state, model);
        for s in 0..2 {
            diag.loss_integral[s] += 0.5 * dt * (loss[s] + new_loss[s]);
        }
        loss = new_loss;
        let l1 = [norm_p(&state.u, 1.0), norm_p(&state.v, 1.0)];
        let sup = [state.u.max_abs(), state.v.max_abs()];
        for s in 0..2 {
            diag.sup_l1[s] = diag.sup_l1[s].max(l1[s]);
            diag.sup_inf[s] = diag.sup_inf[s].max(sup[s]);
        }
        if sup[0] * sup[1] > diag.max_sup_product {
            diag.max_sup_product = sup[0] * sup[1];
            diag.t_max_sup_product = state.t;
        }
        if reached {
            samples.push(state.clone());
            k += 1;
        }
    }
    let growth = (model.rho0 * (t_end - t0)).exp();
    for s in 0..2 {
        diag.mass_envelope_ratio[s] = if diag.initial_l1[s] > 0.0 {
            (diag.sup_l1[s] + diag.loss_integral[s]) / (growth * diag.initial_l1[s])
        } else {
            0.0
        };
    }
    Ok(Trajectory {
        samples,
        diagnostics: diag,
    })
}

/// Fine-grid semi-discrete solution used as the comparison target for
/// coarser grids and particle systems. Snapshots are stored row-major
/// (one row of `m_ref` densities per time).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub format_version: u32,
    pub m_ref: usize,
    pub t_end: f64,
    pub model_hash: String,
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `sup_t ‖u‖_∞`, `sup_t ‖v‖_∞` over the integration.
    pub sup_inf: [f64; 2],
}

pub const REFERENCE_FORMAT_VERSION: u32 = 1;

impl ReferenceSolution {
    pub fn from_trajectory(traj: &Trajectory, model: &RateModel, t_end: f64) -> Self {
        let m_ref = traj.samples[0].m();
        let mut u = Vec::with_capacity(m_ref * traj.samples.len());
        let mut v = Vec::with_capacity(m_ref * traj.samples.len());
        for s in &traj.samples {
            u.extend_from_slice(s.u.values());
            v.extend_from_slice(s.v.values());
        }
        Self {
            format_version: REFERENCE_FORMAT_VERSION,
            m_ref,
            t_end,
            model_hash: model.hash(),
            times: traj.samples.iter().map(|s| s.t).collect(),
            u,
            v,
            sup_inf: traj.diagnostics.sup_inf,
        }
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn u_at(&self, i: usize) -> GridFn {
        GridFn::new(self.u[i * self.m_ref..(i + 1) * self.m_ref].to_vec())
    }

    pub fn v_at(&self, i: usize) -> GridFn {
        GridFn::new(self.v[i * self.m_ref..(i + 1) * self.m_ref].to_vec())
    }

    pub fn state_at(&self, i: usize) -> SemiDiscreteState {
        SemiDiscreteState {
            u: self.u_at(i),
            v: self.v_at(i),
            t: self.times[i],
        }
    }

    /// Index of the last snapshot at or before `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let tol = 1e-12 * t.abs().max(1.0);
        match self.times.partition_point(|&s| s <= t + tol) {
            0 => 0,
            n => n - 1,
        }
    }

    /// Subsamples every `m_ref / m`-th site.
    pub fn restricted(&self, m: usize) -> Result<ReferenceSolution> {
        if m < 2 || self.m_ref % m != 0 {
            return Err(Error::Config(format!(
                "grid size {m} does not divide reference size {}",
                self.m_ref
            )));
        }
        let stride = self.m_ref / m;
        let sub = |data: &[f64]| -> Vec<f64> {
            data.chunks(self.m_ref)
                .flat_map(|row| row.iter().step_by(stride).copied())
                .collect()
        };
        Ok(ReferenceSolution {
            m_ref: m,
            u: sub(&self.u),
            v: sub(&self.v),
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: ReferenceSolution = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if r.format_version != REFERENCE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported reference format version {}",
                r.format_version
            )));
        }
        let rows = r.times.len() * r.m_ref;
        if r.u.len() != rows || r.v.len() != rows {
            return Err(Error::SizeMismatch {
                expected: rows,
                got: r.u.len().min(r.v.len()),
            });
        }
        Ok(r)
    }
}

/// Integrates smooth initial data on the fine grid `m_ref`, failing if the
/// solution leaves the region where the smallness condition holds.
pub fn make_reference(
    model: &RateModel,
    u0: &TorusFn,
    v0: &TorusFn,
    t_end: f64,
    m_ref: usize,
    controls: &IntegrateControls,
) -> Result<ReferenceSolution> {
    let state0 = SemiDiscreteState::from_fns(u0, v0, m_ref)?;
    let traj = integrate(&state0, model, t_end, controls)?;
    let d = &traj.diagnostics;
    let (su, sv) = (d.sup_inf[0], d.sup_inf[1]);
    if !check_smallness(model, su, sv).holds {
        return Err(Error::SmallnessViolated {
            t: d.t_max_sup_product,
            product: su * sv,
            threshold: smallness_threshold(model),
        });
    }
    Ok(ReferenceSolution::from_trajectory(&traj, model, t_end))
}

/// `‖Δ_m(û μ₁(v̂)) - (Δ(u μ₁(v)))^m‖_∞` where hats are restrictions of the
/// fine solution to `m` sites and the continuous Laplacian is evaluated
/// spectrally on the fine grid.
pub fn residual_proxy(model: &RateModel, u_fine: &GridFn, v_fine: &GridFn, m: usize) -> Result<f64> {
    let mf = u_fine.m();
    if m < 2 || mf % m != 0 {
        return Err(Error::Config(format!("{m} does not divide {mf}")));
    }
    let plan = SpectralPlan::new(mf)?;
    let flux = u_fine.zip_map(v_fine, |a, b| model.mu(Species::U, b) * a);
    let mut spec = plan.dft(&flux);
    for (k, c) in spec.iter_mut().enumerate() {
        let kk = if k <= mf / 2 { k as f64 } else { k as f64 - mf as f64 };
        *c *= -4.0 * std::f64::consts::PI.powi(2) * kk * kk;
    }
    if mf % 2 == 0 {
        // The Nyquist mode has no real symmetric derivative; drop it.
        spec[mf / 2] = Complex::new(0.0, 0.0);
    }
    let mut planner = rustfft::FftPlanner::new();
    planner.plan_fft_inverse(mf).process(&mut spec);
    let stride = mf / m;
    let exact: Vec<f64> = spec.iter().step_by(stride).map(|c| c.re / mf as f64).collect();
    let coarse_flux: GridFn = GridFn::new(flux.iter().step_by(stride).copied().collect());
    let disc = laplacian_apply(&coarse_flux);
    Ok(disc
        .iter()
        .zip(&exact)
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs())))
}

/// Time-dependent grid field supplied to the Kolmogorov solver.
pub type TimeField<'a> = &'a (dyn Fn(f64) -> GridFn + Sync);

/// Data of `dz/dt = Δ_M(μz + f) + x` with jumps `z(t_k) = z(t_k⁻) + a_k`.
pub struct KolmogorovProblem<'a> {
    pub mu: TimeField<'a>,
    pub f: TimeField<'a>,
    pub x: TimeField<'a>,
    pub z0: GridFn,
    pub jumps: Vec<(f64, GridFn)>,
    /// Uniform lower bound of `μ`.
    pub alpha: f64,
    pub t_end: f64,
}

/// Settings for [`kolmogorov_solve`]. The default step fraction is small
/// because the energy inequality is an identity when `f = 0`, so the check
/// resolves time-stepping error directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KolmogorovControls {
    pub c_cfl: f64,
}

impl Default for KolmogorovControls {
    fn default() -> Self {
        Self { c_cfl: 0.05 }
    }
}

/// Solution on the accepted step times. `z_left[i]` is the left limit at
/// `times[i]` and `z[i]` the value after any jump there.
#[derive(Clone, Debug)]
pub struct KolmogorovPath {
    pub alpha: f64,
    pub times: Vec<f64>,
    pub z: Vec<GridFn>,
    pub z_left: Vec<GridFn>,
    pub mu: Vec<GridFn>,
    pub f: Vec<GridFn>,
    pub x: Vec<GridFn>,
    /// `(time index, jump)` pairs.
    pub jumps: Vec<(usize, GridFn)>,
}

pub fn kolmogorov_solve(
    problem: &KolmogorovProblem<'_>,
    controls: &KolmogorovControls,
) -> Result<KolmogorovPath> {
    let m = problem.z0.m();
    if m < 2 {
        return Err(Error::TooFewSites(m));
    }
    let mut jumps: Vec<(f64, GridFn)> = problem
        .jumps
        .iter()
        .filter(|(t, _)| *t <= problem.t_end)
        .cloned()
        .collect();
    jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, a) in &jumps {
        if a.m() != m {
            return Err(Error::SizeMismatch {
                expected: m,
                got: a.m(),
            });
        }
    }

    let m2 = (m * m) as f64;
    let check_mu = |mu: &GridFn| -> Result<f64> {
        let lo = mu.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if lo < problem.alpha * (1.0 - 1e-12) {
            return Err(Error::Config(format!(
                "motility {lo} below declared lower bound {}",
                problem.alpha
            )));
        }
        Ok(mu.max_abs())
    };
    let field = |t: f64, z: &GridFn| -> GridFn {
        let mu = (problem.mu)(t);
        let f = (problem.f)(t);
        let w = z.zip_map(&mu, |a, b| a * b);
        let mut out = laplacian_apply(&(&w + &f));
        out += &(problem.x)(t);
        out
    };

    let mut path = KolmogorovPath {
        alpha: problem.alpha,
        times: vec![0.0],
        z: vec![],
        z_left: vec![problem.z0.clone()],
        mu: vec![(problem.mu)(0.0)],
        f: vec![(problem.f)(0.0)],
        x: vec![(problem.x)(0.0)],
        jumps: vec![],
    };
    let mut z = problem.z0.clone();
    let mut next_jump = 0;
    let apply_jumps = |t: f64, z: &mut GridFn, next_jump: &mut usize, path: &mut KolmogorovPath| {
        let idx = path.times.len() - 1;
        while *next_jump < jumps.len() && jumps[*next_jump].0 <= t + 1e-14 {
            let a = &jumps[*next_jump].1;
            *z += a;
            path.jumps.push((idx, a.clone()));
            *next_jump += 1;
        }
    };
    apply_jumps(0.0, &mut z, &mut next_jump, &mut path);
    path.z.push(z.clone());
    let mut t = 0.0;
    check_mu(&path.mu[0])?;
    while t < problem.t_end {
        let mu_max = check_mu(path.mu.last().unwrap())?;
        let mut dt = controls.c_cfl / (4.0 * m2 * mu_max);
        let mut target = problem.t_end;
        if next_jump < jumps.len() {
            target = target.min(jumps[next_jump].0);
        }
        let snap = dt >= target - t;
        if snap {
            dt = target - t;
        }
        if dt > 0.0 {
            let k1 = field(t, &z);
            let mut z1 = z.clone();
            z1.axpy(dt, &k1);
            let k2 = field(t + dt, &z1);
            let mut z2 = z1.clone();
            z2.axpy(dt, &k2);
            let z2 = z.zip_map(&z2, |a, b| 0.75 * a + 0.25 * b);
            let k3 = field(t + 0.5 * dt, &z2);
            let mut z3 = z2.clone();
            z3.axpy(dt, &k3);
            z = z.zip_map(&z3, |a, b| a / 3.0 + 2.0 * b / 3.0);
            t = if snap { target } else { t + dt };
            path.times.push(t);
            path.z_left.push(z.clone());
            path.mu.push((problem.mu)(t));
            path.f.push((problem.f)(t));
            path.x.push((problem.x)(t));
        }
        apply_jumps(t, &mut z, &mut next_jump, &mut path);
        if path.z.len() < path.times.len() {
            path.z.push(z.clone());
        } else {
            *path.z.last_mut().unwrap() = z.clone();
        }
    }
    Ok(path)
}

/// Both sides of the discrete `H⁻¹` energy inequality at the final time and
/// the worst excess over all accepted step times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `max_t (lhs(t) - rhs(t) - tol(t))`; non-positive when the check passes.
    pub worst_excess: f64,
    pub t_worst: f64,
    pub pass: bool,
}

pub const DUALITY_ABS_TOL: f64 = 1e-6;
pub const DUALITY_REL_TOL: f64 = 1e-3;

/// Evaluates
///
/// ```text
/// ‖z(t)‖²_{-1} + ∫₀ᵗ⟨μz, z⟩  ≤  ‖z₀‖²_{-1} + ∫₀ᵗ [z]²[μ] + (1/α)∫₀ᵗ ‖f‖²
///                               + 2∫₀ᵗ ⟨z, x⟩_{-1} + Σ_{t_k ≤ t} (‖a_k‖²_{-1} + 2⟨z(t_k⁻), a_k⟩_{-1})
/// ```
///
/// at every step time, integrals by the trapezoid rule on the steps.
pub fn duality_check(path: &KolmogorovPath) -> Result<DualityReport> {
    let m = path.z_left[0].m();
    let plan = SpectralPlan::new(m)?;
    let n = path.times.len();
    let dissipation = |z: &GridFn, mu: &GridFn| z.zip_map(mu, |a, b| b * a * a).mean();
    let rhs_density = |i: usize, z: &GridFn| {
        let zm = z.mean();
        zm * zm * path.mu[i].mean()
            + path.f[i].dot(&path.f[i]) / path.alpha
            + 2.0 * plan.inner(z, &path.x[i])
    };

    let mut jumps = path.jumps.iter().peekable();
    let mut lhs_int = 0.0;
    let mut rhs_acc = plan.norm_sq(&path.z_left[0]);
    let mut report = DualityReport {
        lhs: 0.0,
        rhs: 0.0,
        worst_excess: f64::NEG_INFINITY,
        t_worst: 0.0,
        pass: true,
    };
    for i in 0..n {
        if i > 0 {
            let dt = path.times[i] - path.times[i - 1];
            lhs_int += 0.5
                * dt
                * (dissipation(&path.z[i - 1], &path.mu[i - 1]) + dissipation(&path.z_left[i], &path.mu[i]));
            rhs_acc += 0.5 * dt * (rhs_density(i - 1, &path.z[i - 1]) + rhs_density(i, &path.z_left[i]));
        }
        // Several jumps at one time act in order; each sees the state left
        // by the previous ones.
        let mut before = path.z_left[i].clone();
        while let Some((_, a)) = jumps.next_if(|(idx, _)| *idx == i) {
            rhs_acc += plan.norm_sq(a) + 2.0 * plan.inner(&before, a);
            before += a;
        }
        let lhs = plan.norm_sq(&path.z[i]) + lhs_int;
        let tol = DUALITY_ABS_TOL + DUALITY_REL_TOL * rhs_acc.abs();
        let excess = lhs - rhs_acc - tol;
        if excess > report.worst_excess {
            report.worst_excess = excess;
            report.t_worst = path.times[i];
        }
        report.lhs = lhs;
        report.rhs = rhs_acc;
    }
    report.pass = report.worst_excess <= 0.0;
    Ok(report)
}

/// Travelling wave `c + a sin(2π(k x + φ) + ω t)` on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub offset: f64,
    pub amp: f64,
    pub k: u32,
    pub phase: f64,
    pub omega: f64,
}

impl Wave {
    pub fn on_grid(&self, m: usize, t: f64) -> GridFn {
        let two_pi = 2.0 * std::f64::consts::PI;
        GridFn::from_fn(m, |x| {
            self.offset + self.amp * (two_pi * (self.k as f64 * x + self.phase) + self.omega * t).sin()
        })
    }

    fn random(rng: &mut impl rand::Rng, offset: f64, amp: f64) -> Self {
        Self {
            offset,
            amp,
            k: rng.random_range(1..=3),
            phase: rng.random(),
            omega: rng.random_range(-4.0..4.0),
        }
    }
}

/// Randomised data for the energy inequality: smooth motility bounded below
/// by `alpha`, smooth `f` and `x`, random `z₀` and a few sparse jumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityInstance {
    pub m: usize,
    pub alpha: f64,
    pub mu: Wave,
    pub f: Wave,
    pub x: Wave,
    pub z0: GridFn,
    pub jumps: Vec<(f64, GridFn)>,
    pub t_end: f64,
}

impl DualityInstance {
    pub fn random(m: usize, t_end: f64, rng: &mut impl rand::Rng) -> Self {
        let alpha = rng.random_range(0.5..2.0);
        // μ = α(1.5 + 0.5 sin(..)) ≥ α.
        let mu = Wave::random(rng, 1.5 * alpha, 0.5 * alpha);
        let f_amp = rng.random_range(0.0..1.0);
        let f = Wave::random(rng, 0.0, f_amp);
        let x_offset = rng.random_range(-0.5..0.5);
        let x_amp = rng.random_range(0.0..1.0);
        let x = Wave::random(rng, x_offset, x_amp);
        let z0 = GridFn::new((0..m).map(|_| rng.random_range(-1.0..1.0)).collect());
        let n_jumps = rng.random_range(0..=3);
        let mut jumps: Vec<(f64, GridFn)> = (0..n_jumps)
            .map(|_| {
                let t = rng.random_range(0.0..t_end);
                let mut a = GridFn::zeros(m);
                let j = rng.random_range(0..m);
                let size = rng.random_range(-0.5..0.5);
                if rng.random::<bool>() {
                    // Motion-like jump: mass moves to a neighbour.
                    a[j] -= size;
                    a[(j + 1) % m] += size;
                } else {
                    a[j] += size;
                }
                (t, a)
            })
            .collect();
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            m,
            alpha,
            mu,
            f,
            x,
            z0,
            jumps,
            t_end,
        }
    }

    pub fn solve(&self, controls: &KolmogorovControls) -> Result<KolmogorovPath> {
        let m = self.m;
        let mu = |t: f64| self.mu.on_grid(m, t);
        let f = |t: f64| self.f.on_grid(m, t);
        let x = |t: f64| self.x.on_grid(m, t);
        let problem = KolmogorovProblem {
            mu: &mu,
            f: &f,
            x: &x,
            z0: self.z0.clone(),
            jumps: self.jumps.clone(),
            alpha: self.alpha,
            t_end: self.t_end,
        };
        kolmogorov_solve(&problem, controls)
    }

    pub fn check(&self, controls: &KolmogorovControls) -> Result<DualityReport> {
        duality_check(&self.solve(controls)?)
    }
}

/// Shared handle for a plan built once per grid size.
pub fn plan_for(m: usize) -> Result<Arc<SpectralPlan>> {
    SpectralPlan::shared(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_skt, SktParams};
    use std::f64::consts::PI;

    fn heat(d: f64) -> RateModel {
        build_skt(&SktParams::conservative(d, d, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn constants_are_stationary_without_reactions() {
        let model = build_skt(&SktParams::conservative(1.0, 2.0, 0.5, 0.3)).unwrap();
        let s = SemiDiscreteState::new(GridFn::constant(8, 0.4), GridFn::constant(8, 0.7), 0.0).unwrap();
        let dt = stability_limit(&s, &model, 0.9);
        let next = step(&s, &model, dt, &StepControls::default()).unwrap();
        assert!((&next.u - &s.u).max_abs() < 1e-15);
        assert!((&next.v - &s.v).max_abs() < 1e-15);
    }

    #[test]
    fn step_rejects_unstable_dt() {
        let model = heat(1.0);
        let s = SemiDiscreteState::new(GridFn::constant(8, 1.0), GridFn::constant(8, 1.0), 0.0).unwrap();
        let limit = stability_limit(&s, &model, 0.9);
        assert!(matches!(
            step(&s, &model, 2.0 * limit, &StepControls::default()),
            Err(Error::StepRejected { .. })
        ));
    }

    #[test]
    fn single_mode_decays_at_grid_eigenvalue() {
        let m = 8;
        let model = heat(1.0);
        let u0 = GridFn::from_fn(m, |x| 1.0 + 0.1 * (2.0 * PI * x).sin());
        let s = SemiDiscreteState::new(u0, GridFn::zeros(m), 0.0).unwrap();
        let controls = IntegrateControls {
            sample_dt: 0.05,
            dt_factor: 0.2,
            ..IntegrateControls::default()
        };
        let traj = integrate(&s, &model, 0.05, &controls).unwrap();
        let plan = SpectralPlan::new(m).unwrap();
        let amp = |g: &GridFn| plan.dft(g)[1].norm();
        let rate = (amp(&s.u) / amp(&traj.last().u)).ln() / 0.05;
        let lam = 4.0 * 64.0 * (PI / 8.0).sin().powi(2);
        assert!((lam - 37.49).abs() < 0.01);
        assert!((rate - lam).abs() < 1e-4 * lam, "rate {rate}");
    }

    #[test]
    fn linear_growth_of_the_mean() {
        let model = build_skt(&SktParams {
            d1: 1.0,
            d2: 1.0,
            rho1: 1.0,
            ..SktParams::default()
        })
        .unwrap();
        let u0 = GridFn::from_fn(16, |x| 0.5 + 0.2 * (2.0 * PI * x).cos());
        let s = SemiDiscreteState::new(u0.clone(), GridFn::zeros(16), 0.0).unwrap();
        let traj = integrate(&s, &model, 1.0, &IntegrateControls::default()).unwrap();
        let got = traj.last().u.mean();
        assert!((got - u0.mean() * 1f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn logistic_relaxes_to_one() {
        let model = build_skt(&SktParams {
            d1: 1.0,
            d2: 1.0,
            rho1: 1.0,
            s11: 1.0,
            ..SktParams::default()
        })
        .unwrap();
        let s = SemiDiscreteState::new(GridFn::constant(2, 0.1), GridFn::zeros(2), 0.0).unwrap();
        let controls = IntegrateControls {
            sample_dt: 1.0,
            ..IntegrateControls::default()
        };
        let traj = integrate(&s, &model, 20.0, &controls).unwrap();
        assert!((traj.last().u[0] - 1.0).abs() < 1e-6);
        // Closed form u(t) = 1 / (1 + 9e^{-t}) at t = 1.
        let exact = 1.0 / (1.0 + 9.0 * (-1f64).exp());
        assert!((traj.samples[1].u[1] - exact).abs() < 1e-6);
    }

    #[test]
    fn conservative_mass_and_positivity() {
        let m = 32;
        let model = build_skt(&SktParams::conservative(1.0, 0.5, 0.3, 0.8)).unwrap();
        let u0 = GridFn::from_fn(m, |x| if x < 0.3 { 1.0 } else { 0.0 });
        let v0 = GridFn::from_fn(m, |x| 0.5 + 0.5 * (6.0 * PI * x).sin());
        let s = SemiDiscreteState::new(u0.clone(), v0.clone(), 0.0).unwrap();
        let traj = integrate(&s, &model, 0.2, &IntegrateControls::default()).unwrap();
        for st in &traj.samples {
            assert!(st.u.iter().chain(st.v.iter()).all(|x| *x >= 0.0));
            assert!((st.u.mean() - u0.mean()).abs() <= 1e-12 * u0.mean());
            assert!((st.v.mean() - v0.mean()).abs() <= 1e-12 * v0.mean());
        }
        assert!((traj.diagnostics.sup_l1[0] - u0.mean()).abs() < 1e-12);
    }

    #[test]
    fn reference_snapshot_round_trip() {
        let model = build_skt(&SktParams::conservative(1.0, 1.0, 0.1, 0.1)).unwrap();
        let u0 = TorusFn::sampler(|x| 0.2 + 0.1 * (2.0 * PI * x).sin());
        let v0 = TorusFn::sampler(|x| 0.2 + 0.1 * (2.0 * PI * x).cos());
        let controls = IntegrateControls {
            sample_dt: 0.05,
            ..IntegrateControls::default()
        };
        let r = make_reference(&model, &u0, &v0, 0.1, 32, &controls).unwrap();
        assert_eq!(r.times.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.json");
        r.save(&p).unwrap();
        let back = ReferenceSolution::load(&p).unwrap();
        assert_eq!(back, r);
        let coarse = r.restricted(8).unwrap();
        assert_eq!(coarse.u_at(2)[1], r.u_at(2)[4]);
        assert!(r.restricted(12).is_err());
        assert_eq!(r.index_at(0.07), 1);
        assert_eq!(r.index_at(0.1), 2);
    }

    #[test]
    fn zero_reference_and_smallness_violation() {
        let model = build_skt(&SktParams::conservative(1.0, 1.0, 1.0, 1.0)).unwrap();
        let zero = TorusFn::constant(0.0);
        let r = make_reference(&model, &zero, &zero, 0.05, 16, &IntegrateControls::default()).unwrap();
        assert!(r.u.iter().chain(&r.v).all(|x| *x == 0.0));
        let big = TorusFn::constant(1.5);
        let err = make_reference(&model, &big, &big, 0.05, 16, &IntegrateControls::default()).unwrap_err();
        assert!(matches!(err, Error::SmallnessViolated { .. }));
    }

    #[test]
    fn residual_proxy_decreases() {
        let model = build_skt(&SktParams::conservative(1.0, 1.0, 0.1, 0.1)).unwrap();
        let mf = 256;
        let u = GridFn::from_fn(mf, |x| 0.2 + 0.1 * (2.0 * PI * x).sin());
        let v = GridFn::from_fn(mf, |x| 0.2 + 0.1 * (2.0 * PI * x).cos());
        let r: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&m| residual_proxy(&model, &u, &v, m).unwrap())
            .collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    fn zero_field(m: usize) -> impl Fn(f64) -> GridFn + Sync {
        move |_| GridFn::zeros(m)
    }

    #[test]
    fn kolmogorov_heat_contracts() {
        let m = 16;
        let one = |_: f64| GridFn::constant(16, 1.0);
        let zero = zero_field(m);
        let z0 = GridFn::from_fn(m, |x| (2.0 * PI * x).sin() + 0.3 * (10.0 * PI * x).cos());
        let p = KolmogorovProblem {
            mu: &one,
            f: &zero,
            x: &zero,
            z0,
            jumps: vec![],
            alpha: 1.0,
            t_end: 0.1,
        };
        let path = kolmogorov_solve(&p, &KolmogorovControls::default()).unwrap();
        let norms: Vec<f64> = path.z.iter().map(|z| norm_p(z, 2.0)).collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn kolmogorov_constant_source() {
        let m = 8;
        let one = |_: f64| GridFn::constant(8, 1.0);
        let zero = zero_field(m);
        let c = |_: f64| GridFn::constant(8, 0.7);
        let p = KolmogorovProblem {
            mu: &one,
            f: &zero,
            x: &c,
            z0: GridFn::zeros(m),
            jumps: vec![],
            alpha: 1.0,
            t_end: 0.3,
        };
        let path = kolmogorov_solve(&p, &KolmogorovControls::default()).unwrap();
        let last = path.z.last().unwrap();
        assert!((&*last - &GridFn::constant(m, 0.7 * 0.3)).max_abs() < 1e-12);
    }

    #[test]
    fn random_duality_instances_pass() {
        let mut rng = crate::rng::replica_rng(17, 0);
        for _ in 0..5 {
            let inst = DualityInstance::random(8, 0.2, &mut rng);
            assert!(inst.mu.offset - inst.mu.amp >= inst.alpha * (1.0 - 1e-12));
            let rep = inst.check(&KolmogorovControls::default()).unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn duality_zero_data() {
        let m = 4;
        let one = |_: f64| GridFn::constant(4, 1.0);
        let zero = zero_field(m);
        let p = KolmogorovProblem {
            mu: &one,
            f: &zero,
            x: &zero,
            z0: GridFn::zeros(m),
            jumps: vec![],
            alpha: 1.0,
            t_end: 0.2,
        };
        let r = duality_check(&kolmogorov_solve(&p, &KolmogorovControls::default()).unwrap()).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.pass);
    }

    #[test]
    fn duality_single_jump() {
        let m = 16;
        let one = |_: f64| GridFn::constant(16, 1.0);
        let zero = zero_field(m);
        let a = &GridFn::basis(m, 0) * 0.25;
        let p = KolmogorovProblem {
            mu: &one,
            f: &zero,
            x: &zero,
            z0: GridFn::zeros(m),
            jumps: vec![(0.25, a.clone())],
            alpha: 1.0,
            t_end: 0.5,
        };
        let path = kolmogorov_solve(&p, &KolmogorovControls::default()).unwrap();
        assert!(path.times.iter().any(|&t| t == 0.25));
        let r = duality_check(&path).unwrap();
        let plan = SpectralPlan::new(m).unwrap();
        // Jump energy plus the mean term ∫[z]²[μ] over the remaining 0.25.
        let want = plan.norm_sq(&a) + 0.25 * a.mean().powi(2);
        assert!((r.rhs - want).abs() < 1e-12 * want);
        assert!(r.pass, "{r:?}");
        // With f = 0 the only slack is ∫⟨μz̃, z̃⟩ with z̃ the mean-free part.
        let slack: f64 = (1..path.times.len())
            .map(|i| {
                let a = path.z[i - 1].mean_free();
                let b = path.z_left[i].mean_free();
                0.5 * (path.times[i] - path.times[i - 1]) * (a.dot(&a) + b.dot(&b))
            })
            .sum();
        assert!((r.lhs + slack - r.rhs).abs() < 1e-4 * r.rhs, "{r:?} {slack}");
    }
}
