//! Rate models: motilities `μ_i`, birth rates `b_i` and death rates `d_i` of
//! the two species, with their declared structural constants and a
//! sampling-based validator.
//!
//! Species 1 (`u`) moves with motility `μ₁(v)` and species 2 (`v`) with
//! `μ₂(u)`. The net per-capita growth is `λ_i = b_i - d_i` and the reaction
//! term is `R₁ = u λ₁`, `R₂ = v λ₂`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The two species.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Species {
    U,
    V,
}

impl Species {
    pub const BOTH: [Species; 2] = [Species::U, Species::V];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Species::U => 0,
            Species::V => 1,
        }
    }
}

/// Polynomial in one variable, `Σ c_k x^k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly1 {
    pub coeffs: Vec<f64>,
}

impl Poly1 {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn affine(c0: f64, c1: f64) -> Self {
        Self::new(vec![c0, c1])
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// One monomial `coef · u^pu · v^pv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    #[serde(default)]
    pub pu: u32,
    #[serde(default)]
    pub pv: u32,
}

/// Polynomial in `(u, v)` as a list of monomials.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly2 {
    pub terms: Vec<Monomial>,
}

impl Poly2 {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    /// `c + cu·u + cv·v`, dropping zero terms.
    pub fn affine(c: f64, cu: f64, cv: f64) -> Self {
        let terms = [(c, 0, 0), (cu, 1, 0), (cv, 0, 1)]
            .into_iter()
            .filter(|t| t.0 != 0.0)
            .map(|(coef, pu, pv)| Monomial { coef, pu, pv })
            .collect();
        Self { terms }
    }

    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * u.powi(t.pu as i32) * v.powi(t.pv as i32))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }
}

/// Coefficients of the SKT system with Lotka–Volterra reactions:
/// `μ₁(v) = d1 + a1 v`, `μ₂(u) = d2 + a2 u`, births `ρ_i`, deaths
/// `s_i1 u + s_i2 v`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SktParams {
    pub d1: f64,
    pub d2: f64,
    pub a1: f64,
    pub a2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub s11: f64,
    pub s12: f64,
    pub s21: f64,
    pub s22: f64,
}

impl SktParams {
    /// Pure cross-diffusion, no reactions.
    pub fn conservative(d1: f64, d2: f64, a1: f64, a2: f64) -> Self {
        Self {
            d1,
            d2,
            a1,
            a2,
            ..Self::default()
        }
    }
}

/// A fully specified rate model with its declared constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub family: String,
    pub mu1: Poly1,
    pub mu2: Poly1,
    pub b1: Poly2,
    pub b2: Poly2,
    pub d1: Poly2,
    pub d2: Poly2,
    /// Lower bounds `α_i` of the motilities.
    pub alpha: [f64; 2],
    /// Lipschitz constants `L_i` of the motilities.
    pub lip_mu: [f64; 2],
    /// Lipschitz constants of `b_1, b_2` (Euclidean in `(u, v)`).
    pub lip_birth: [f64; 2],
    /// Lipschitz constants of `d_1, d_2`.
    pub lip_death: [f64; 2],
    /// Cap on `λ₁ + λ₂`.
    pub rho0: f64,
    /// Birth-domination constant in `[0, 1)`.
    pub alpha_dom: f64,
}

impl RateModel {
    /// Constant per-capita motility, birth and death rates per species.
    ///
    /// Zero motility is allowed, so this covers the linear birth, death and
    /// random-walk chains used as exactness baselines.
    pub fn constant_rates(mu: [f64; 2], birth: [f64; 2], death: [f64; 2]) -> Self {
        let conservative = birth == [0.0; 2] && death == [0.0; 2];
        RateModel {
            family: if conservative { "conservative" } else { "linear" }.into(),
            mu1: Poly1::affine(mu[0], 0.0),
            mu2: Poly1::affine(mu[1], 0.0),
            b1: Poly2::affine(birth[0], 0.0, 0.0),
            b2: Poly2::affine(birth[1], 0.0, 0.0),
            d1: Poly2::affine(death[0], 0.0, 0.0),
            d2: Poly2::affine(death[1], 0.0, 0.0),
            alpha: mu,
            lip_mu: [0.0; 2],
            lip_birth: [0.0; 2],
            lip_death: [0.0; 2],
            rho0: birth[0].max(0.0) + birth[1].max(0.0),
            alpha_dom: 0.0,
        }
    }

    /// Motility of `species`, evaluated at the density of the other species.
    #[inline]
    pub fn mu(&self, species: Species, other: f64) -> f64 {
        match species {
            Species::U => self.mu1.eval(other),
            Species::V => self.mu2.eval(other),
        }
    }

    #[inline]
    pub fn birth(&self, species: Species, u: f64, v: f64) -> f64 {
        match species {
            Species::U => self.b1.eval(u, v),
            Species::V => self.b2.eval(u, v),
        }
    }

    #[inline]
    pub fn death(&self, species: Species, u: f64, v: f64) -> f64 {
        match species {
            Species::U => self.d1.eval(u, v),
            Species::V => self.d2.eval(u, v),
        }
    }

    /// `λ_i = b_i - d_i`.
    #[inline]
    pub fn growth(&self, species: Species, u: f64, v: f64) -> f64 {
        self.birth(species, u, v) - self.death(species, u, v)
    }

    /// `R_i`: `u λ₁(u, v)` or `v λ₂(u, v)`.
    #[inline]
    pub fn reaction(&self, species: Species, u: f64, v: f64) -> f64 {
        let own = match species {
            Species::U => u,
            Species::V => v,
        };
        own * self.growth(species, u, v)
    }

    /// True when births and deaths vanish identically.
    pub fn is_conservative(&self) -> bool {
        self.b1.is_zero() && self.b2.is_zero() && self.d1.is_zero() && self.d2.is_zero()
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the model in
    /// snapshots and manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("rate model serialises");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SKT model with Lotka–Volterra birth/death split.
pub fn build_skt(p: &SktParams) -> Result<RateModel> {
    let all = [
        p.d1, p.d2, p.a1, p.a2, p.rho1, p.rho2, p.s11, p.s12, p.s21, p.s22,
    ];
    if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Config(
            "SKT coefficients must be finite and non-negative".into(),
        ));
    }
    if p.d1 * p.d2 == 0.0 {
        return Err(Error::DegenerateDiffusion { d1: p.d1, d2: p.d2 });
    }
    let conservative = p.rho1 == 0.0
        && p.rho2 == 0.0
        && p.s11 == 0.0
        && p.s12 == 0.0
        && p.s21 == 0.0
        && p.s22 == 0.0;
    Ok(RateModel {
        family: if conservative { "conservative" } else { "skt" }.into(),
        mu1: Poly1::affine(p.d1, p.a1),
        mu2: Poly1::affine(p.d2, p.a2),
        b1: Poly2::affine(p.rho1, 0.0, 0.0),
        b2: Poly2::affine(p.rho2, 0.0, 0.0),
        d1: Poly2::affine(0.0, p.s11, p.s12),
        d2: Poly2::affine(0.0, p.s21, p.s22),
        alpha: [p.d1, p.d2],
        lip_mu: [p.a1, p.a2],
        lip_birth: [0.0, 0.0],
        lip_death: [p.s11.hypot(p.s12), p.s21.hypot(p.s22)],
        rho0: p.rho1 + p.rho2,
        alpha_dom: 0.0,
    })
}

/// Outcome of the smallness test `u_inf · v_inf < α₁α₂/(L₁L₂)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smallness {
    pub holds: bool,
    /// `α₁α₂/(L₁L₂) - u_inf v_inf`, or `+∞` when `L₁L₂ = 0`.
    pub margin: f64,
}

/// `α₁α₂/(L₁L₂)`, infinite when either motility is constant.
pub fn smallness_threshold(model: &RateModel) -> f64 {
    let l = model.lip_mu[0] * model.lip_mu[1];
    if l == 0.0 {
        f64::INFINITY
    } else {
        model.alpha[0] * model.alpha[1] / l
    }
}

pub fn check_smallness(model: &RateModel, u_inf: f64, v_inf: f64) -> Smallness {
    let threshold = smallness_threshold(model);
    let margin = if threshold.is_infinite() {
        f64::INFINITY
    } else {
        threshold - u_inf * v_inf
    };
    Smallness {
        holds: margin > 0.0,
        margin,
    }
}

/// Rectangle `[0, u_max] × [0, v_max]` of densities to sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub u_max: f64,
    pub v_max: f64,
}

/// One validated bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    /// Largest amount by which the bound was exceeded (0 when it held).
    pub worst_violation: f64,
    /// For bounds of the form `lhs ≲ rhs`: the smallest constant covering
    /// every sample.
    pub fitted_constant: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub n_samples: usize,
    pub checks: Vec<HypothesisCheck>,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Ceiling on fitted constants above which a `≲` bound is declared failed.
pub const DEFAULT_CONSTANT_CEILING: f64 = 1e3;

/// Relative slack granted to sampled Lipschitz quotients.
const LIPSCHITZ_SLACK: f64 = 0.01;

fn sample_points(bx: &SampleBox, n_samples: usize) -> Vec<(f64, f64)> {
    let n_grid = ((n_samples / 2) as f64).sqrt().ceil().max(2.0) as usize;
    let mut pts = Vec::with_capacity(n_grid * n_grid + n_samples / 2);
    for i in 0..n_grid {
        for j in 0..n_grid {
            let u = bx.u_max * i as f64 / (n_grid - 1) as f64;
            let v = bx.v_max * j as f64 / (n_grid - 1) as f64;
            pts.push((u, v));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a3f);
    for _ in 0..n_samples / 2 {
        pts.push((
            rng.random_range(0.0..=bx.u_max),
            rng.random_range(0.0..=bx.v_max),
        ));
    }
    pts
}

struct Worst {
    name: &'static str,
    violation: f64,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            violation: 0.0,
        }
    }

    fn observe(&mut self, excess: f64) {
        if excess > self.violation || excess.is_nan() {
            self.violation = if excess.is_nan() { f64::INFINITY } else { excess };
        }
    }

    fn finish(self) -> HypothesisCheck {
        HypothesisCheck {
            name: self.name.into(),
            worst_violation: self.violation,
            fitted_constant: None,
            passed: self.violation == 0.0,
        }
    }
}

/// Validates the declared structure of `model` on samples of `bx`: motility
/// lower bounds and Lipschitz constants, non-negativity of births and
/// deaths, the growth cap `λ₁ + λ₂ ≤ ρ₀`, birth domination
/// `b_i ≤ ρ₀ + α d_i`, and the quadratic death bound
/// `d₁² + d₂² ≤ C(1 + u(1 + d₁) + v(1 + d₂))` with a fitted `C`.
pub fn check_hypotheses(
    model: &RateModel,
    bx: &SampleBox,
    n_samples: usize,
) -> Result<HypothesisReport> {
    if !(bx.u_max > 0.0 && bx.v_max > 0.0) {
        return Err(Error::Config("sample box must be non-degenerate".into()));
    }
    let pts = sample_points(bx, n_samples);

    let mut mu_lower = Worst::new("motility_lower_bound");
    let mut mu_lip = Worst::new("motility_lipschitz");
    let mut rate_lip = Worst::new("birth_death_lipschitz");
    let mut nonneg = Worst::new("rates_nonnegative");
    let mut growth = Worst::new("growth_cap");
    let mut domination = Worst::new("birth_domination");
    let mut quad_constant: f64 = 0.0;

    let mut prev: Option<(f64, f64)> = None;
    for &(u, v) in &pts {
        mu_lower.observe(model.alpha[0] - model.mu1.eval(v));
        mu_lower.observe(model.alpha[1] - model.mu2.eval(u));

        let (b1, b2) = (model.b1.eval(u, v), model.b2.eval(u, v));
        let (d1, d2) = (model.d1.eval(u, v), model.d2.eval(u, v));
        for r in [b1, b2, d1, d2] {
            nonneg.observe(-r);
        }
        growth.observe((b1 - d1) + (b2 - d2) - model.rho0);
        domination.observe(b1 - model.rho0 - model.alpha_dom * d1);
        domination.observe(b2 - model.rho0 - model.alpha_dom * d2);

        let rhs = 1.0 + u * (1.0 + d1) + v * (1.0 + d2);
        quad_constant = quad_constant.max((d1 * d1 + d2 * d2) / rhs);

        // Difference quotients against the previous sample and against a
        // nearby perturbation.
        let h = 1e-4 * bx.u_max.max(bx.v_max);
        let mut pairs = vec![((u, v), (u + h, v + 0.5 * h))];
        if let Some(p) = prev {
            pairs.push(((u, v), p));
        }
        for ((ua, va), (ub, vb)) in pairs {
            let dist = (ua - ub).hypot(va - vb);
            if dist == 0.0 {
                continue;
            }
            // (difference, distance, declared constant, motility?)
            let quotients = [
                (model.mu1.eval(va) - model.mu1.eval(vb), (va - vb).abs(), model.lip_mu[0], true),
                (model.mu2.eval(ua) - model.mu2.eval(ub), (ua - ub).abs(), model.lip_mu[1], true),
                (model.b1.eval(ua, va) - model.b1.eval(ub, vb), dist, model.lip_birth[0], false),
                (model.b2.eval(ua, va) - model.b2.eval(ub, vb), dist, model.lip_birth[1], false),
                (model.d1.eval(ua, va) - model.d1.eval(ub, vb), dist, model.lip_death[0], false),
                (model.d2.eval(ua, va) - model.d2.eval(ub, vb), dist, model.lip_death[1], false),
            ];
            for (diff, d, lip, is_mu) in quotients {
                if d > 0.0 {
                    let excess = diff.abs() / d - lip * (1.0 + LIPSCHITZ_SLACK) - 1e-12;
                    if is_mu {
                        mu_lip.observe(excess);
                    } else {
                        rate_lip.observe(excess);
                    }
                }
            }
        }
        prev = Some((u, v));
    }

    let mut checks = vec![
        mu_lower.finish(),
        mu_lip.finish(),
        rate_lip.finish(),
        nonneg.finish(),
        growth.finish(),
        domination.finish(),
    ];
    checks.push(HypothesisCheck {
        name: "quadratic_death_bound".into(),
        worst_violation: (quad_constant - DEFAULT_CONSTANT_CEILING).max(0.0),
        fitted_constant: Some(quad_constant),
        passed: quad_constant <= DEFAULT_CONSTANT_CEILING,
    });
    Ok(HypothesisReport {
        n_samples: pts.len(),
        checks,
    })
}

/// Model block of an experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSpec {
    Skt(SktParams),
    Conservative {
        d1: f64,
        d2: f64,
        #[serde(default)]
        a1: f64,
        #[serde(default)]
        a2: f64,
    },
    CustomPolynomial(CustomPolynomial),
}

/// User-supplied polynomial rates with declared constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomPolynomial {
    pub mu1: Poly1,
    pub mu2: Poly1,
    #[serde(default)]
    pub b1: Poly2,
    #[serde(default)]
    pub b2: Poly2,
    #[serde(default)]
    pub d1: Poly2,
    #[serde(default)]
    pub d2: Poly2,
    pub alpha: [f64; 2],
    pub lip_mu: [f64; 2],
    #[serde(default)]
    pub lip_birth: [f64; 2],
    #[serde(default)]
    pub lip_death: [f64; 2],
    #[serde(default)]
    pub rho0: f64,
    #[serde(default)]
    pub alpha_dom: f64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<RateModel> {
        match self {
            ModelSpec::Skt(p) => build_skt(p),
            ModelSpec::Conservative { d1, d2, a1, a2 } => {
                build_skt(&SktParams::conservative(*d1, *d2, *a1, *a2))
            }
            ModelSpec::CustomPolynomial(c) => {
                if !(c.alpha[0] > 0.0 && c.alpha[1] > 0.0) {
                    return Err(Error::Config("motility lower bounds must be positive".into()));
                }
                if !(0.0..1.0).contains(&c.alpha_dom) {
                    return Err(Error::Config("alpha_dom must lie in [0, 1)".into()));
                }
                Ok(RateModel {
                    family: "custom-polynomial".into(),
                    mu1: c.mu1.clone(),
                    mu2: c.mu2.clone(),
                    b1: c.b1.clone(),
                    b2: c.b2.clone(),
                    d1: c.d1.clone(),
                    d2: c.d2.clone(),
                    alpha: c.alpha,
                    lip_mu: c.lip_mu,
                    lip_birth: c.lip_birth,
                    lip_death: c.lip_death,
                    rho0: c.rho0,
                    alpha_dom: c.alpha_dom,
                })
            }
        }
    }
}
