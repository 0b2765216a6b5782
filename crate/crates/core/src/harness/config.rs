//! Experiment configuration: a single JSON document.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::{FourierSeries, NormMode, TorusFn};
use crate::model::{ModelSpec, RateModel};
use crate::particle::run::{LeapControls, DEFAULT_RATE_BUDGET};
use crate::particle::InitialCondition;
use crate::semidiscrete::{make_reference, IntegrateControls, ReferenceSolution};

/// One Fourier mode `sin · sin(2πkx) + cos · cos(2πkx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: usize,
    #[serde(default)]
    pub sin: f64,
    #[serde(default)]
    pub cos: f64,
}

/// An initial density on the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSpec {
    Constant { value: f64 },
    Trig { mean: f64, modes: Vec<Mode> },
    /// Piecewise-linear interpolant of grid values.
    Grid { values: Vec<f64> },
}

impl FieldSpec {
    pub fn to_torus_fn(&self) -> Result<TorusFn> {
        Ok(match self {
            FieldSpec::Constant { value } => TorusFn::constant(*value),
            FieldSpec::Trig { mean, modes } => {
                let kmax = modes.iter().map(|m| m.k).max().unwrap_or(0);
                let parts: Vec<FourierSeries> = modes
                    .iter()
                    .map(|m| FourierSeries::trig(m.k, m.sin, m.cos))
                    .collect();
                TorusFn::Fourier(FourierSeries::from_fn(kmax, |k| {
                    let c0 = if k == 0 { *mean } else { 0.0 };
                    parts.iter().map(|p| p.coeff(k)).sum::<Complex<f64>>() + c0
                }))
            }
            FieldSpec::Grid { values } => {
                if values.len() < 2 {
                    return Err(Error::TooFewSites(values.len()));
                }
                TorusFn::PiecewiseLinear(crate::grid::GridFn::new(values.clone()))
            }
        })
    }
}

/// How particle counts are drawn from the initial densities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// `round(N u₀(x_j))`.
    #[default]
    Deterministic,
    /// `Poisson(N u₀(x_j))`.
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialSpec {
    pub u0: FieldSpec,
    pub v0: FieldSpec,
    pub sampling: Sampling,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            u0: FieldSpec::Trig {
                mean: 1.0,
                modes: vec![Mode {
                    k: 1,
                    sin: 0.5,
                    cos: 0.0,
                }],
            },
            v0: FieldSpec::Trig {
                mean: 1.0,
                modes: vec![Mode {
                    k: 1,
                    sin: 0.0,
                    cos: 0.5,
                }],
            },
            sampling: Sampling::Deterministic,
        }
    }
}

impl InitialSpec {
    pub fn fields(&self) -> Result<(TorusFn, TorusFn)> {
        Ok((self.u0.to_torus_fn()?, self.v0.to_torus_fn()?))
    }

    pub fn particle_condition(&self) -> Result<InitialCondition> {
        let (u0, v0) = self.fields()?;
        Ok(match self.sampling {
            Sampling::Deterministic => InitialCondition::Deterministic { u0, v0 },
            Sampling::Poisson => InitialCondition::Poisson { u0, v0 },
        })
    }
}

/// Fine reference: integrated at `m_ref`, or loaded from a snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceSpec {
    pub m_ref: usize,
    pub snapshot: Option<PathBuf>,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            m_ref: 256,
            snapshot: None,
        }
    }
}

/// Target value with an absolute tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub target: f64,
    pub tol: f64,
}

impl Tolerance {
    pub fn admits(&self, x: f64) -> bool {
        (x - self.target).abs() <= self.tol
    }
}

/// Checks that decide the exit status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckSpec {
    /// Slope of `log gap` against `log N` at every fixed `M`.
    pub slope_n: Option<Tolerance>,
    /// Per-doubling ratio of `𝔼 sup ‖𝓜₁‖²_{-1,M}` over the `N` grid.
    pub mart_halving: Option<Tolerance>,
    /// Particle gap non-increasing in `M` at the largest `N`.
    pub decreasing_in_m: bool,
    /// Semi-discrete error strictly decreasing in `M`.
    pub sd_strictly_decreasing: bool,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            slope_n: None,
            mart_halving: None,
            decreasing_in_m: false,
            sd_strictly_decreasing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualitySpec {
    pub instances: usize,
    pub m: usize,
    pub t_end: f64,
}

impl Default for DualitySpec {
    fn default() -> Self {
        Self {
            instances: 100,
            m: 16,
            t_end: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdSpec {
    pub epsilon: f64,
    pub k_grid: Vec<f64>,
    pub replicas: u64,
    /// Length of the unit-rate Poisson paths.
    pub horizon: f64,
}

impl Default for LdSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            k_grid: vec![10.0, 20.0, 40.0],
            replicas: 100_000,
            horizon: 160.0,
        }
    }
}

/// Grids for the exact operator and interpolation checks of `norms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormsSpec {
    /// Spectrum checked for every `M` in `2..=spectrum_m_max`.
    pub spectrum_m_max: usize,
    /// Jump-size identities checked for every `M` in `2..=jump_m_max`.
    pub jump_m_max: usize,
    /// Interpolation error of `sin(2πx)` on these grids.
    pub interp_m: Vec<usize>,
    /// Admissible range of successive error ratios.
    pub interp_ratio: (f64, f64),
}

impl Default for NormsSpec {
    fn default() -> Self {
        Self {
            spectrum_m_max: 1024,
            jump_m_max: 512,
            interp_m: vec![8, 16, 32, 64],
            interp_ratio: (3.6, 4.4),
        }
    }
}

/// Single-cell particle run for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSpec {
    pub m: usize,
    pub n: u64,
    pub event_log: bool,
    pub record_counting: bool,
    /// Use tau-leaping with these controls instead of exact simulation.
    pub tau_leap: Option<LeapControls>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            m: 16,
            n: 64,
            event_log: false,
            record_counting: true,
            tau_leap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub initial: InitialSpec,
    pub t_end: f64,
    pub m_grid: Vec<usize>,
    pub n_grid: Vec<u64>,
    pub replicas: u64,
    pub seed: u64,
    pub sample_dt: f64,
    pub norm_mode: NormMode,
    pub reference: ReferenceSpec,
    pub output_dir: Option<PathBuf>,
    pub rate_budget: f64,
    /// Fourier cut-off for continuous `H⁻¹` norms; defaults to `4 m_ref`.
    pub kmax: Option<usize>,
    /// Start semi-discrete runs from the restricted initial data.
    pub matched_initial: bool,
    pub checks: CheckSpec,
    pub duality: DualitySpec,
    pub ld: LdSpec,
    pub simulate: SimulateSpec,
    pub norms: NormsSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Conservative {
                d1: 1.0,
                d2: 1.0,
                a1: 0.1,
                a2: 0.1,
            },
            initial: InitialSpec::default(),
            t_end: 0.25,
            m_grid: vec![8, 16, 32],
            n_grid: vec![64, 128, 256, 512],
            replicas: 64,
            seed: 0,
            sample_dt: 0.01,
            norm_mode: NormMode::Sampled,
            reference: ReferenceSpec::default(),
            output_dir: None,
            rate_budget: DEFAULT_RATE_BUDGET,
            kmax: None,
            matched_initial: true,
            checks: CheckSpec::default(),
            duality: DualitySpec::default(),
            ld: LdSpec::default(),
            simulate: SimulateSpec::default(),
            norms: NormsSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.sample_dt > 0.0) {
            return bad(format!("sample_dt must be positive, got {}", self.sample_dt));
        }
        if self.replicas < 1 {
            return bad("replicas must be at least 1".into());
        }
        if self.reference.m_ref < 2 {
            return Err(Error::TooFewSites(self.reference.m_ref));
        }
        for &m in &self.m_grid {
            if m < 2 {
                return Err(Error::TooFewSites(m));
            }
            if self.reference.m_ref % m != 0 {
                return bad(format!("m_ref {} is not divisible by m = {m}", self.reference.m_ref));
            }
        }
        if self.n_grid.contains(&0) {
            return bad("population scales must be positive".into());
        }
        self.model.build()?;
        self.initial.fields()?;
        Ok(())
    }

    pub fn rate_model(&self) -> Result<RateModel> {
        self.model.build()
    }

    pub fn kmax(&self) -> usize {
        self.kmax.unwrap_or(4 * self.reference.m_ref)
    }

    pub fn integrate_controls(&self) -> IntegrateControls {
        IntegrateControls {
            sample_dt: self.sample_dt,
            ..Default::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        crate::model::hex(&Sha256::digest(&json))
    }

    /// Loads the snapshot or integrates the reference on `m_ref` sites.
    pub fn reference_solution(&self, model: &RateModel) -> Result<Arc<ReferenceSolution>> {
        if let Some(path) = &self.reference.snapshot {
            let r = ReferenceSolution::load(path)?;
            if r.model_hash != model.hash() {
                return Err(Error::Config(format!(
                    "snapshot {} was computed for a different model",
                    path.display()
                )));
            }
            if r.t_end + 1e-12 < self.t_end {
                return Err(Error::Config(format!(
                    "snapshot ends at {} before t_end = {}",
                    r.t_end, self.t_end
                )));
            }
            for &m in &self.m_grid {
                if r.m_ref % m != 0 {
                    return Err(Error::Config(format!("snapshot size {} not divisible by {m}", r.m_ref)));
                }
            }
            return Ok(Arc::new(r));
        }
        let (u0, v0) = self.initial.fields()?;
        Ok(Arc::new(make_reference(
            model,
            &u0,
            &v0,
            self.t_end,
            self.reference.m_ref,
            &self.integrate_controls(),
        )?))
    }
}
