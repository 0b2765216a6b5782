//! One function per CLI subcommand. Each writes its outputs into an
//! [`OutputDir`] and returns the checks that decide the exit status.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{ensemble_summary, ld_poisson_check, ld_process_check, martingale_report, DeviationReport, MIN_REPLICAS};
use crate::error::{Error, Result};
use crate::grid::{GridFn, SpectralPlan};
use crate::interp::{interp_error_l2, TorusFn};
use crate::model::Species;
use crate::particle::io::{write_event_log, write_summary_json, write_trace_csv};
use crate::particle::{init_particles, run, tau_leap_run, PathTrace, RunControls, TransitionClass};
use crate::rng::replica_rng;
use crate::semidiscrete::{integrate, DualityInstance, DualityReport, KolmogorovControls, SemiDiscreteState};

use super::config::ExperimentConfig;
use super::convergence::{run_convergence, run_semidiscrete_convergence};
use super::output::{emit_convergence, emit_semidiscrete, loglog_svg, CheckResult, Formats, Manifest, OutputDir, PlotPoint};

/// Tolerance on incremental-versus-recomputed martingale values.
pub const MART_CHECK_TOL: f64 = 1e-8;
/// Relative mass drift allowed for conservative semi-discrete runs.
pub const MASS_DRIFT_TOL: f64 = 1e-12;
/// Largest admissible constant in the `e^{ρ₀T}` mass envelope.
pub const ENVELOPE_CONSTANT_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Ode,
    Converge,
    SdConverge,
    DualityCheck,
    LdCheck,
    Norms,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Simulate,
        Command::Ode,
        Command::Converge,
        Command::SdConverge,
        Command::DualityCheck,
        Command::LdCheck,
        Command::Norms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ode => "ode",
            Command::Converge => "converge",
            Command::SdConverge => "sd-converge",
            Command::DualityCheck => "duality-check",
            Command::LdCheck => "ld-check",
            Command::Norms => "norms",
        }
    }
}

/// Runs `cmd` and writes its outputs only.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::Ode => ode(cfg, out),
        Command::Converge => converge(cfg, out),
        Command::SdConverge => sd_converge(cfg, out),
        Command::DualityCheck => duality(cfg, out),
        Command::LdCheck => ld(cfg, out),
        Command::Norms => norms(cfg, out),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub checks: Vec<CheckResult>,
    pub failures: Vec<CheckResult>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `cmd` on a pool of `workers` threads, then writes `checks.json`,
/// `failures.json` and `manifest.json` under `root`.
pub fn run_command(
    cmd: Command,
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    root: &Path,
    formats: Formats,
    workers: usize,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut out = OutputDir::create(root, formats)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let checks = pool.install(|| execute(cmd, cfg, &mut out))?;
    let failures: Vec<CheckResult> = checks.iter().filter(|c| !c.passed).cloned().collect();
    out.json_always("checks.json", &checks)?;
    out.json_always("failures.json", &failures)?;
    Manifest::build(&out, cmd.name(), config_path, cfg.hash(), cfg.seed, workers.max(1))?.write(root)?;
    Ok(RunOutcome { checks, failures })
}

fn particle_controls(cfg: &ExperimentConfig, record_counting: bool) -> RunControls {
    RunControls {
        t_end: cfg.t_end,
        sample_dt: cfg.sample_dt,
        rate_budget: cfg.rate_budget,
        track_martingale: true,
        record_counting,
        event_log: cfg.simulate.event_log,
    }
}

/// `cfg.replicas` paths at the `simulate` cell; replica `r` uses stream
/// `stream_base | r`.
fn particle_ensemble(cfg: &ExperimentConfig, record_counting: bool, stream_base: u64) -> Result<Vec<PathTrace>> {
    let model = cfg.rate_model()?;
    let initial = cfg.initial.particle_condition()?;
    let controls = particle_controls(cfg, record_counting);
    let (m, n) = (cfg.simulate.m, cfg.simulate.n);
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, stream_base | r);
            let state = init_particles(&model, &initial, m, n, &mut rng)?;
            match &cfg.simulate.tau_leap {
                Some(leap) => tau_leap_run(state, &model, &controls, leap, r, &mut rng),
                None => run(state, &model, &controls, None, r, &mut rng),
            }
        })
        .collect()
}

fn simulate(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let model = cfg.rate_model()?;
    let traces = particle_ensemble(cfg, cfg.simulate.record_counting, 0)?;
    out.csv("trace.csv", |w| write_trace_csv(w, &traces))?;
    if out.formats.json {
        out.write_with("summary.json", |w| write_summary_json(w, &traces))?;
    }
    let label = format!("m{}_n{}", cfg.simulate.m, cfg.simulate.n);
    let ensemble = ensemble_summary(&traces)?;
    out.csv("ensemble.csv", |w| ensemble.write_csv(w, &label))?;
    out.json("ensemble.json", &ensemble)?;
    if cfg.simulate.event_log {
        for tr in &traces {
            if let Some(ev) = &tr.event_log {
                out.write_with(&format!("events_r{}.bin", tr.replica), |w| write_event_log(w, ev))?;
            }
        }
    }

    let mut checks = Vec::new();
    let worst = traces
        .iter()
        .filter_map(|t| t.mart_check_error)
        .fold(0.0, f64::max);
    checks.push(CheckResult::new(
        "martingale_recomputation",
        worst <= MART_CHECK_TOL,
        worst,
        format!("<= {MART_CHECK_TOL:e}"),
    ));
    if model.is_conservative() && cfg.simulate.tau_leap.is_none() {
        let drift = traces
            .iter()
            .map(|tr| {
                Species::BOTH
                    .map(|s| {
                        let a: u64 = tr.samples[0].counts(s).iter().sum();
                        let b: u64 = tr.last().counts(s).iter().sum();
                        a.abs_diff(b) as f64
                    })
                    .into_iter()
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        checks.push(CheckResult::new("integer_mass_invariant", drift == 0.0, drift, "0"));
    }
    if traces.len() >= MIN_REPLICAS && cfg.simulate.tau_leap.is_none() {
        let rep = martingale_report(&traces)?;
        out.json("martingale.json", &rep)?;
        checks.push(CheckResult::new(
            "martingale_mean_zero",
            rep.mean_zero_pass,
            rep.mean_zero_score,
            format!("<= {} standard errors", crate::analytics::MEAN_ZERO_SIGMAS),
        ));
    }
    Ok(checks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OdeRun {
    m: usize,
    diagnostics: crate::semidiscrete::Diagnostics,
    mass_drift: [f64; 2],
}

fn ode(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let model = cfg.rate_model()?;
    let (u0, v0) = cfg.initial.fields()?;
    let controls = cfg.integrate_controls();
    let trajs: Vec<(usize, crate::semidiscrete::Trajectory)> = cfg
        .m_grid
        .par_iter()
        .map(|&m| {
            let s0 = SemiDiscreteState::from_fns(&u0, &v0, m)?;
            Ok((m, integrate(&s0, &model, cfg.t_end, &controls)?))
        })
        .collect::<Result<_>>()?;
    out.csv("ode.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["m", "t", "species", "site", "density"])?;
        for (m, tr) in &trajs {
            for s in &tr.samples {
                for sp in Species::BOTH {
                    for (j, x) in s.species(sp).iter().enumerate() {
                        c.write_record(&[
                            m.to_string(),
                            s.t.to_string(),
                            (sp.index() + 1).to_string(),
                            j.to_string(),
                            x.to_string(),
                        ])?;
                    }
                }
            }
        }
        c.flush()?;
        Ok(())
    })?;
    let runs: Vec<OdeRun> = trajs
        .iter()
        .map(|(m, tr)| {
            let first = &tr.samples[0];
            let drift = Species::BOTH.map(|sp| {
                let a = first.species(sp).mean();
                tr.samples
                    .iter()
                    .map(|s| (s.species(sp).mean() - a).abs() / a.abs().max(f64::MIN_POSITIVE))
                    .fold(0.0, f64::max)
            });
            OdeRun {
                m: *m,
                diagnostics: tr.diagnostics.clone(),
                mass_drift: drift,
            }
        })
        .collect();
    out.json("ode.json", &runs)?;
    if out.formats.json {
        let reference = cfg.reference_solution(&model)?;
        let path = out.root().join("reference.json");
        reference.save(&path)?;
        out.record("reference.json".into());
    }

    let mut checks = Vec::new();
    if model.is_conservative() {
        let drift = runs
            .iter()
            .flat_map(|r| r.mass_drift)
            .fold(0.0, f64::max);
        checks.push(CheckResult::new(
            "mass_conservation",
            drift <= MASS_DRIFT_TOL,
            drift,
            format!("<= {MASS_DRIFT_TOL:e} relative"),
        ));
    } else {
        let c = runs
            .iter()
            .flat_map(|r| r.diagnostics.mass_envelope_ratio)
            .fold(0.0, f64::max);
        checks.push(CheckResult::new(
            "mass_envelope_constant",
            c <= ENVELOPE_CONSTANT_MAX,
            c,
            format!("<= {ENVELOPE_CONSTANT_MAX}"),
        ));
    }
    Ok(checks)
}

fn converge(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let report = run_convergence(cfg)?;
    emit_convergence(out, &report)?;
    let mut checks = Vec::new();
    for c in &report.cells {
        if let Some(why) = &c.skipped {
            checks.push(CheckResult::new(format!("cell_m{}_n{}_completed", c.m, c.n), false, f64::NAN, why.clone()));
        }
    }
    let worst = report.cells.iter().map(|c| c.mart_check_error).fold(0.0, f64::max);
    checks.push(CheckResult::new(
        "martingale_recomputation",
        worst <= MART_CHECK_TOL,
        worst,
        format!("<= {MART_CHECK_TOL:e}"),
    ));
    if let Some(tol) = cfg.checks.slope_n {
        for &m in &cfg.m_grid {
            let slope = report.slope_n(m).map(|f| f.slope).unwrap_or(f64::NAN);
            checks.push(CheckResult::new(
                format!("gap_slope_in_n_m{m}"),
                tol.admits(slope),
                slope,
                format!("{} ± {}", tol.target, tol.tol),
            ));
        }
    }
    if let Some(tol) = cfg.checks.mart_halving {
        for &m in &cfg.m_grid {
            let ratios = report.mart_ratios(m);
            let mut ns: Vec<u64> = report
                .cells
                .iter()
                .filter(|c| c.m == m && c.skipped.is_none())
                .map(|c| c.n)
                .collect();
            ns.dedup();
            for (i, r) in ratios.iter().enumerate() {
                // Per doubling of N, whatever the grid spacing.
                let doublings = (ns[i + 1] as f64 / ns[i] as f64).log2();
                let per = r.powf(1.0 / doublings);
                checks.push(CheckResult::new(
                    format!("mart_ratio_m{m}_n{}_to_n{}", ns[i], ns[i + 1]),
                    tol.admits(per),
                    per,
                    format!("{} ± {}", tol.target, tol.tol),
                ));
            }
        }
    }
    if cfg.checks.decreasing_in_m {
        if let Some(&n) = cfg.n_grid.iter().max() {
            let gaps: Vec<f64> = cfg
                .m_grid
                .iter()
                .filter_map(|&m| report.cell(m, n).filter(|c| c.skipped.is_none()).map(|c| c.gap.mean))
                .collect();
            let worst = gaps.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            checks.push(CheckResult::new(
                format!("gap_non_increasing_in_m_n{n}"),
                gaps.len() == cfg.m_grid.len() && worst <= 0.0,
                worst,
                "<= 0",
            ));
        }
    }
    Ok(checks)
}

fn sd_converge(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let report = run_semidiscrete_convergence(cfg)?;
    emit_semidiscrete(out, &report)?;
    let mut checks = Vec::new();
    if cfg.checks.sd_strictly_decreasing {
        let worst = report
            .rows
            .windows(2)
            .map(|w| w[1].error - w[0].error)
            .fold(f64::NEG_INFINITY, f64::max);
        checks.push(CheckResult::new(
            "sd_error_strictly_decreasing",
            report.strictly_decreasing,
            worst,
            "< 0",
        ));
    }
    Ok(checks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DualityRow {
    instance: usize,
    report: DualityReport,
}

fn duality(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let spec = &cfg.duality;
    let controls = KolmogorovControls::default();
    let rows: Vec<DualityRow> = (0..spec.instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(cfg.seed, i as u64);
            let inst = DualityInstance::random(spec.m, spec.t_end, &mut rng);
            Ok(DualityRow {
                instance: i,
                report: inst.check(&controls)?,
            })
        })
        .collect::<Result<_>>()?;
    out.csv("duality.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["instance", "lhs", "rhs", "worst_excess", "t_worst", "pass"])?;
        for r in &rows {
            c.write_record(&[
                r.instance.to_string(),
                r.report.lhs.to_string(),
                r.report.rhs.to_string(),
                r.report.worst_excess.to_string(),
                r.report.t_worst.to_string(),
                r.report.pass.to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.json("duality.json", &rows)?;
    let failed = rows.iter().filter(|r| !r.report.pass).count();
    let worst = rows.iter().map(|r| r.report.worst_excess).fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        CheckResult::new("duality_instances_pass", failed == 0, failed as f64, "0 failures"),
        CheckResult::new("duality_worst_excess", worst <= 0.0, worst, "<= 0"),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdRow {
    pub source: String,
    pub report: DeviationReport,
}

/// Stream offset for the particle paths of `ld-check`, clear of the
/// Poisson replica streams.
const LD_PROCESS_STREAMS: u64 = 1 << 63;

fn ld(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let spec = &cfg.ld;
    let mut rows: Vec<LdRow> = ld_poisson_check(spec.horizon, spec.epsilon, &spec.k_grid, spec.replicas, cfg.seed)
        .into_iter()
        .map(|report| LdRow {
            source: "poisson".into(),
            report,
        })
        .collect();
    let traces = particle_ensemble(cfg, true, LD_PROCESS_STREAMS)?;
    for class in TransitionClass::ALL {
        if traces.iter().all(|t| t.account.count(class) == 0) {
            continue;
        }
        for &k in &spec.k_grid {
            rows.push(LdRow {
                source: format!("process:{}", crate::analytics::class_name(class)),
                report: ld_process_check(&traces, class, spec.epsilon, k)?,
            });
        }
    }
    out.csv("ld.csv", |w| write_ld_csv(w, &rows))?;
    out.json("ld.json", &rows)?;
    let pts: Vec<PlotPoint> = rows
        .iter()
        .filter(|r| r.source == "poisson")
        .map(|r| PlotPoint {
            x: r.report.k_threshold,
            y: r.report.observed_freq,
            err: 0.5 * (r.report.ci.1 - r.report.ci.0),
        })
        .collect();
    out.svg(
        "ld.svg",
        &loglog_svg(&format!("deviation frequency, eps = {}", spec.epsilon), "K", "frequency", &pts, None),
    )?;

    let mut checks = Vec::new();
    let poisson: Vec<&DeviationReport> = rows.iter().filter(|r| r.source == "poisson").map(|r| &r.report).collect();
    let worst_rise = poisson
        .windows(2)
        .map(|w| w[1].observed_freq - w[0].observed_freq)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(CheckResult::new(
        "poisson_frequency_decreasing_in_k",
        worst_rise <= 0.0,
        worst_rise,
        "<= 0",
    ));
    for r in &rows {
        let k = r.report.k_threshold;
        checks.push(CheckResult::new(
            format!("{}_k{}_within_chernoff", r.source, k),
            r.report.ci.0 <= r.report.chernoff,
            r.report.ci.0,
            format!("<= {}", r.report.chernoff),
        ));
    }
    Ok(checks)
}

pub fn write_ld_csv<W: Write>(w: W, rows: &[LdRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "source", "epsilon", "k", "replicas", "hits", "freq", "ci_low", "ci_high", "chernoff", "unit_bound",
    ])?;
    for r in rows {
        let d = &r.report;
        c.write_record(&[
            r.source.clone(),
            d.epsilon.to_string(),
            d.k_threshold.to_string(),
            d.n_replicas.to_string(),
            d.hits.to_string(),
            d.observed_freq.to_string(),
            d.ci.0.to_string(),
            d.ci.1.to_string(),
            d.chernoff.to_string(),
            d.bound_value.to_string(),
        ])?;
    }
    c.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub quantity: String,
    pub m: usize,
    pub value: f64,
    pub expected: f64,
}

/// Spectrum, jump-size and interpolation-rate rows.
pub fn norm_rows(cfg: &ExperimentConfig) -> Result<Vec<NormRow>> {
    let spec = &cfg.norms;
    let row = |q: &str, m: usize, value: f64, expected: f64| NormRow {
        quantity: q.into(),
        m,
        value,
        expected,
    };
    let mut rows: Vec<NormRow> = (2..=spec.spectrum_m_max.max(spec.jump_m_max))
        .into_par_iter()
        .map(|m| -> Result<Vec<NormRow>> {
            let plan = SpectralPlan::new(m)?;
            let mut r = Vec::new();
            if m <= spec.spectrum_m_max {
                let ev = plan.eigenvalues();
                let zero_tol = 1e-9;
                let zeros = ev.iter().filter(|l| l.abs() <= zero_tol).count();
                let pos = ev.iter().copied().filter(|l| l.abs() > zero_tol);
                let (lo, hi) = pos.fold((f64::INFINITY, 0.0f64), |(a, b), l| (a.min(l), b.max(l)));
                let mf = m as f64;
                r.push(row("zero_eigenvalues", m, zeros as f64, 1.0));
                r.push(row("min_positive_eigenvalue", m, lo, 16.0));
                r.push(row("max_eigenvalue", m, hi, 4.0 * mf * mf));
            }
            if m <= spec.jump_m_max {
                let mf = m as f64;
                let mut d = GridFn::zeros(m);
                d.values_mut()[1] = 1.0;
                d.values_mut()[0] = -1.0;
                r.push(row("neighbour_jump_norm_sq", m, plan.norm_sq(&d), (mf - 1.0) / mf.powi(4)));
                r.push(row("site_norm_sq", m, plan.norm_sq(&GridFn::basis(m, 0)), 1.0 / mf + 1.0 / (mf * mf)));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let f = TorusFn::sampler(|x| (2.0 * std::f64::consts::PI * x).sin());
    for &m in &spec.interp_m {
        rows.push(row("interp_error_l2", m, interp_error_l2(&f, m), f64::NAN));
    }
    Ok(rows)
}

fn norms(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Vec<CheckResult>> {
    let rows = norm_rows(cfg)?;
    out.csv("norms.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["quantity", "m", "value", "expected"])?;
        for r in &rows {
            c.write_record(&[r.quantity.clone(), r.m.to_string(), r.value.to_string(), r.expected.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.json("norms.json", &rows)?;

    let spec = &cfg.norms;
    fn by<'a>(rows: &'a [NormRow], q: &'a str) -> impl Iterator<Item = &'a NormRow> + 'a {
        rows.iter().filter(move |r| r.quantity == q)
    }
    let by = |q: &'static str| by(&rows, q);
    let count_bad = |it: &mut dyn Iterator<Item = &NormRow>, ok: &dyn Fn(&NormRow) -> bool| it.filter(|r| !ok(r)).count();
    let mut checks = Vec::new();
    let spec_bad = count_bad(&mut by("zero_eigenvalues"), &|r| r.value == 1.0)
        + count_bad(&mut by("min_positive_eigenvalue"), &|r| r.value >= 16.0 * (1.0 - 1e-12))
        + count_bad(&mut by("max_eigenvalue"), &|r| r.value <= r.expected * (1.0 + 1e-12));
    checks.push(CheckResult::new("spectrum_in_range", spec_bad == 0, spec_bad as f64, "0 violations"));
    let worst_jump = by("neighbour_jump_norm_sq")
        .map(|r| (r.value - r.expected).abs())
        .fold(0.0, f64::max);
    checks.push(CheckResult::new("neighbour_jump_identity", worst_jump <= 1e-12, worst_jump, "<= 1e-12"));
    let site_bad = count_bad(&mut by("site_norm_sq"), &|r| r.value <= r.expected);
    checks.push(CheckResult::new("site_norm_bound", site_bad == 0, site_bad as f64, "0 violations"));
    let errs: Vec<f64> = by("interp_error_l2").map(|r| r.value).collect();
    let (lo, hi) = spec.interp_ratio;
    for (w, ms) in errs.windows(2).zip(spec.interp_m.windows(2)) {
        let ratio = w[0] / w[1];
        checks.push(CheckResult::new(
            format!("interp_ratio_m{}_to_m{}", ms[0], ms[1]),
            (lo..=hi).contains(&ratio),
            ratio,
            format!("in [{lo}, {hi}]"),
        ));
    }
    Ok(checks)
}
