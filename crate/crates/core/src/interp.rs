//! Continuous periodic functions on `[0, 1)` and their relation to grid
//! functions: hat-function interpolation, restriction to a grid, Fourier
//! based Sobolev norms and the space–time mixed norms
//! `sup_t ‖z(t)‖²_{-1} + ∫ ‖z(t)‖²_2 dt`.
//!
//! Sobolev norms use the weight `(1 + 4π²k²)^s` on the Fourier coefficient of
//! `e^{2πikx}`, i.e. the wavenumber of the mode rather than its index. With
//! this convention the continuous `H⁻¹` norm of a restricted smooth function
//! and its discrete counterpart agree as the grid is refined.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{GridFn, SpectralPlan};

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Sobolev weight `(1 + 4π²k²)^s`.
#[inline]
pub fn sobolev_weight(k: i64, s: f64) -> f64 {
    let w = 2.0 * PI * k as f64;
    (1.0 + w * w).powf(s)
}

/// Truncated Fourier series `Σ_{|k| ≤ K} c_k e^{2πikx}` of a real function.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSeries {
    kmax: usize,
    coeffs: Vec<Complex<f64>>,
}

impl FourierSeries {
    pub fn zeros(kmax: usize) -> Self {
        Self {
            kmax,
            coeffs: vec![Complex::new(0.0, 0.0); 2 * kmax + 1],
        }
    }

    /// Builds a series from `k ↦ c_k` for `|k| ≤ kmax`.
    pub fn from_fn(kmax: usize, c: impl Fn(i64) -> Complex<f64>) -> Self {
        let k = kmax as i64;
        Self {
            kmax,
            coeffs: (-k..=k).map(c).collect(),
        }
    }

    /// `a sin(2πkx) + b cos(2πkx)` as a series.
    pub fn trig(k: usize, sin_amp: f64, cos_amp: f64) -> Self {
        let mut s = Self::zeros(k);
        let kk = k as i64;
        *s.coeff_mut(kk) += Complex::new(cos_amp / 2.0, -sin_amp / 2.0);
        *s.coeff_mut(-kk) += Complex::new(cos_amp / 2.0, sin_amp / 2.0);
        s
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn coeff(&self, k: i64) -> Complex<f64> {
        if k.unsigned_abs() as usize > self.kmax {
            return Complex::new(0.0, 0.0);
        }
        self.coeffs[(k + self.kmax as i64) as usize]
    }

    pub fn coeff_mut(&mut self, k: i64) -> &mut Complex<f64> {
        assert!(k.unsigned_abs() as usize <= self.kmax, "mode out of range");
        &mut self.coeffs[(k + self.kmax as i64) as usize]
    }

    pub fn modes(&self) -> impl Iterator<Item = (i64, Complex<f64>)> + '_ {
        let k = self.kmax as i64;
        (-k..=k).zip(self.coeffs.iter().copied())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.modes()
            .map(|(k, c)| {
                let (s, co) = (2.0 * PI * k as f64 * x).sin_cos();
                c.re * co - c.im * s
            })
            .sum()
    }

    /// Multiplies each coefficient by a real symbol.
    pub fn apply_symbol(&self, symbol: impl Fn(i64) -> f64) -> Self {
        Self {
            kmax: self.kmax,
            coeffs: self.modes().map(|(k, c)| c * symbol(k)).collect(),
        }
    }

    /// Truncates or zero-pads to a new cut-off.
    pub fn resized(&self, kmax: usize) -> Self {
        Self::from_fn(kmax, |k| self.coeff(k))
    }

    pub fn sub(&self, other: &FourierSeries) -> Self {
        let kmax = self.kmax.max(other.kmax);
        Self::from_fn(kmax, |k| self.coeff(k) - other.coeff(k))
    }

    /// `Σ |c_k|² (1 + 4π²k²)^s`.
    pub fn hs_norm_sq(&self, s: f64) -> f64 {
        self.modes()
            .map(|(k, c)| c.norm_sqr() * sobolev_weight(k, s))
            .sum()
    }

    /// Continuous Laplacian, symbol `-4π²k²`.
    pub fn laplacian(&self) -> Self {
        self.apply_symbol(|k| -4.0 * PI * PI * (k * k) as f64)
    }
}

/// A periodic function on `[0, 1)`.
#[derive(Clone)]
pub enum TorusFn {
    /// Closed-form pointwise evaluation.
    Sampler(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Truncated Fourier series.
    Fourier(FourierSeries),
    /// Hat-function interpolant of grid values.
    PiecewiseLinear(GridFn),
}

impl fmt::Debug for TorusFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TorusFn::Sampler(_) => f.write_str("TorusFn::Sampler(..)"),
            TorusFn::Fourier(s) => f.debug_tuple("TorusFn::Fourier").field(s).finish(),
            TorusFn::PiecewiseLinear(u) => {
                f.debug_tuple("TorusFn::PiecewiseLinear").field(u).finish()
            }
        }
    }
}

impl TorusFn {
    pub fn sampler(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TorusFn::Sampler(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        TorusFn::Fourier(FourierSeries::from_fn(0, |_| Complex::new(c, 0.0)))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TorusFn::Sampler(f) => f(x.rem_euclid(1.0)),
            TorusFn::Fourier(s) => s.eval(x),
            TorusFn::PiecewiseLinear(u) => {
                let m = u.m();
                let pos = x.rem_euclid(1.0) * m as f64;
                let nearest = pos.round();
                // Snap to nodes so that grid points reproduce the data exactly.
                if (pos - nearest).abs() < 1e-9 {
                    return u[(nearest as usize) % m];
                }
                let j = (pos.floor() as usize).min(m - 1);
                let frac = pos - j as f64;
                u[j] * (1.0 - frac) + u[(j + 1) % m] * frac
            }
        }
    }

    /// Fourier coefficients for `|k| ≤ kmax`. Exact for the piecewise-linear
    /// and Fourier variants; for samplers computed by an oversampled DFT.
    pub fn fourier(&self, kmax: usize) -> FourierSeries {
        match self {
            TorusFn::Fourier(s) => s.resized(kmax),
            TorusFn::PiecewiseLinear(u) => interpolant_fourier(u, kmax),
            TorusFn::Sampler(_) => {
                let n = 8 * (kmax + 1);
                let samples = GridFn::from_fn(n, |x| self.eval(x));
                let dft = real_dft(&samples);
                let nf = n as f64;
                FourierSeries::from_fn(kmax, |k| dft[k.rem_euclid(n as i64) as usize] / nf)
            }
        }
    }
}

fn real_dft(u: &GridFn) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(u.m()).process(&mut buf);
    buf
}

/// Coefficients of `π_M u`: `c_k = DFT(u)[k mod M] / M · sinc²(πk/M)`.
fn interpolant_fourier(u: &GridFn, kmax: usize) -> FourierSeries {
    let m = u.m();
    let mf = m as f64;
    let dft = real_dft(u);
    FourierSeries::from_fn(kmax, |k| {
        let s = sinc(PI * k as f64 / mf);
        dft[k.rem_euclid(m as i64) as usize] * (s * s / mf)
    })
}

/// `π_M u`.
pub fn interpolate(u: &GridFn) -> TorusFn {
    TorusFn::PiecewiseLinear(u.clone())
}

/// `(f(j/m))_j`.
pub fn restrict(f: &TorusFn, m: usize) -> GridFn {
    GridFn::from_fn(m, |x| f.eval(x))
}

/// Values of `π_M u` on the finer grid of `m_fine` sites; `M` must divide
/// `m_fine`.
pub fn prolong(u: &GridFn, m_fine: usize) -> GridFn {
    let m = u.m();
    assert!(m_fine % m == 0, "{m} does not divide {m_fine}");
    let r = m_fine / m;
    let rf = r as f64;
    let mut out = Vec::with_capacity(m_fine);
    for j in 0..m {
        let (a, b) = (u[j], u[(j + 1) % m]);
        for q in 0..r {
            let w = q as f64 / rf;
            out.push(a * (1.0 - w) + b * w);
        }
    }
    GridFn::new(out)
}

/// Exact `‖π_M d‖²_{L²} = (1/M) Σ (d_j² + d_j d_{j+1} + d_{j+1}²)/3`.
pub fn interpolant_l2_sq(d: &GridFn) -> f64 {
    let m = d.m();
    let v = d.values();
    (0..m)
        .map(|j| {
            let (a, b) = (v[j], v[(j + 1) % m]);
            (a * a + a * b + b * b) / 3.0
        })
        .sum::<f64>()
        / m as f64
}

/// Composite Simpson rule for `∫₀¹ g`, with `cells · sub` panels aligned to
/// the cell boundaries `j / cells`. `sub` must be even.
pub fn integrate_periodic(g: impl Fn(f64) -> f64, cells: usize, sub: usize) -> f64 {
    assert!(sub % 2 == 0 && sub > 0, "Simpson needs an even panel count");
    let n = cells * sub;
    let h = 1.0 / n as f64;
    // Periodic integrand: endpoints coincide, so weights are 4 on odd and
    // 2 on even nodes.
    let total: f64 = (0..n)
        .map(|i| {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            w * g(i as f64 * h)
        })
        .sum();
    total * h / 3.0
}

/// Initial panels per grid cell used by [`interp_error_l2`].
pub const PANELS_PER_CELL: usize = 16;

/// Squared-error quadrature: doubles the panel count from
/// [`PANELS_PER_CELL`] until two successive values agree to `1e-8` relative.
fn adaptive_sq_integral(g: impl Fn(f64) -> f64, cells: usize) -> f64 {
    let mut sub = PANELS_PER_CELL;
    let mut prev = integrate_periodic(&g, cells, sub);
    while sub < 1024 {
        sub *= 2;
        let next = integrate_periodic(&g, cells, sub);
        if (next - prev).abs() <= 1e-8 * next.abs() {
            return next;
        }
        prev = next;
    }
    prev
}

/// `‖f - π_M(f̂^M)‖_{L²}` by composite quadrature aligned with the grid.
pub fn interp_error_l2(f: &TorusFn, m: usize) -> f64 {
    let pi_f = interpolate(&restrict(f, m));
    adaptive_sq_integral(
        |x| {
            let e = f.eval(x) - pi_f.eval(x);
            e * e
        },
        m,
    )
    .sqrt()
}

/// `‖f - π_M(f̂^M)‖_{H⁻¹}` from Fourier coefficients up to `kmax`.
pub fn interp_error_hm1(f: &TorusFn, m: usize, kmax: usize) -> f64 {
    let diff = f
        .fourier(kmax)
        .sub(&interpolant_fourier(&restrict(f, m), kmax));
    diff.hs_norm_sq(-1.0).sqrt()
}

/// `Δ_h f = h⁻²(f(·+h) + f(·-h) - 2f)`. Fourier inputs stay spectral with
/// symbol `-4h⁻² sin²(πkh)`.
pub fn finite_diff_laplacian(f: &TorusFn, h: f64) -> TorusFn {
    assert!(h > 0.0 && h < 0.5, "step must lie in (0, 1/2)");
    match f {
        TorusFn::Fourier(s) => TorusFn::Fourier(s.apply_symbol(|k| {
            let sn = (PI * k as f64 * h).sin();
            -4.0 * sn * sn / (h * h)
        })),
        _ => {
            let f = f.clone();
            TorusFn::sampler(move |x| (f.eval(x + h) + f.eval(x - h) - 2.0 * f.eval(x)) / (h * h))
        }
    }
}

/// `‖f - g‖_{L²}` by composite Simpson quadrature on `cells · sub` panels.
pub fn l2_distance(f: &TorusFn, g: &TorusFn, cells: usize, sub: usize) -> f64 {
    integrate_periodic(
        |x| {
            let e = f.eval(x) - g.eval(x);
            e * e
        },
        cells,
        sub,
    )
    .sqrt()
}

/// Precomputed weights for Sobolev norms of hat interpolants on a fixed grid.
///
/// Modes of `π_M d` that alias to the same DFT bin share one coefficient up
/// to the factor `sinc²(πk/M)`, so
/// `‖π_M d‖²_{H^s} = Σ_r |DFT(d)_r / M|² W_r` with
/// `W_r = Σ_{k ≡ r, |k| ≤ K} sinc⁴(πk/M)(1 + 4π²k²)^s`.
#[derive(Clone, Debug)]
pub struct InterpNorms {
    m: usize,
    hm1_weights: Vec<f64>,
    plan: Arc<SpectralPlan>,
}

impl InterpNorms {
    pub fn new(plan: Arc<SpectralPlan>, kmax: usize) -> Self {
        let m = plan.m();
        let mf = m as f64;
        let mut hm1_weights = vec![0.0; m];
        let k = kmax as i64;
        for kk in -k..=k {
            let s = sinc(PI * kk as f64 / mf);
            hm1_weights[kk.rem_euclid(m as i64) as usize] += s.powi(4) * sobolev_weight(kk, -1.0);
        }
        Self {
            m,
            hm1_weights,
            plan,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn plan(&self) -> &Arc<SpectralPlan> {
        &self.plan
    }

    /// `‖π_M d‖²_{H⁻¹}`.
    pub fn hm1_sq(&self, d: &GridFn) -> f64 {
        let dft = self.plan.dft(d);
        let m2 = (self.m * self.m) as f64;
        dft.iter()
            .zip(&self.hm1_weights)
            .map(|(c, w)| c.norm_sqr() * w)
            .sum::<f64>()
            / m2
    }

    /// `‖π_M d‖²_{L²}`, exact.
    pub fn l2_sq(&self, d: &GridFn) -> f64 {
        interpolant_l2_sq(d)
    }
}

/// How the time integral in a mixed norm is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Trapezoid rule between samples; the sup only sees sample times.
    Sampled,
    /// Path is piecewise constant; each value holds until the next update.
    EventExact,
}

/// Running `sup_t ‖z‖²_{-1} + ∫ ‖z‖²_2 dt`.
#[derive(Clone, Debug)]
pub struct MixedNormAccumulator {
    mode: NormMode,
    t: f64,
    sup_hminus1_sq: f64,
    l2_time_integral: f64,
    last_l2_sq: Option<f64>,
}

impl MixedNormAccumulator {
    pub fn new(mode: NormMode, t0: f64) -> Self {
        Self {
            mode,
            t: t0,
            sup_hminus1_sq: 0.0,
            l2_time_integral: 0.0,
            last_l2_sq: None,
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn sup_hminus1_sq(&self) -> f64 {
        self.sup_hminus1_sq
    }

    pub fn l2_time_integral(&self) -> f64 {
        self.l2_time_integral
    }

    pub fn value(&self) -> f64 {
        self.sup_hminus1_sq + self.l2_time_integral
    }

    /// Records a sample with precomputed squared norms at time `t_next`.
    ///
    /// In event-exact mode the value holds on `[t_next, next update)`; the
    /// previously recorded value is integrated over `[t, t_next)`.
    pub fn push(&mut self, t_next: f64, hm1_sq: f64, l2_sq: f64) -> Result<()> {
        if t_next < self.t {
            return Err(Error::NonMonotoneTime {
                from: self.t,
                to: t_next,
            });
        }
        let dt = t_next - self.t;
        if let Some(prev) = self.last_l2_sq {
            self.l2_time_integral += match self.mode {
                NormMode::Sampled => 0.5 * dt * (prev + l2_sq),
                NormMode::EventExact => dt * prev,
            };
        }
        self.sup_hminus1_sq = self.sup_hminus1_sq.max(hm1_sq);
        self.last_l2_sq = Some(l2_sq);
        self.t = t_next;
        Ok(())
    }

    /// Event-exact mode: closes the last constant segment at `t_end`.
    pub fn finish(&mut self, t_end: f64) -> Result<()> {
        if self.mode == NormMode::EventExact {
            if let Some(prev) = self.last_l2_sq {
                return self.push(t_end, 0.0, prev);
            }
        }
        if t_end < self.t {
            return Err(Error::NonMonotoneTime {
                from: self.t,
                to: t_end,
            });
        }
        Ok(())
    }
}

/// Adds the sample `z` at `t_next` using discrete norms.
pub fn mixed_norm_update(
    acc: &mut MixedNormAccumulator,
    t_next: f64,
    z: &GridFn,
    plan: &SpectralPlan,
) -> Result<()> {
    acc.push(t_next, plan.norm_sq(z), z.dot(z))
}

/// `sup_t ‖z‖²_{H⁻¹} + ∫ ‖z‖²_{L²} dt` over a sampled path of continuous
/// functions, computed mode-wise with cut-off `kmax`. The sup is over
/// samples; the time integral uses the trapezoid rule on the samples, and
/// samples past `t_end` are ignored.
pub fn continuous_mixed_norm(path: &[(f64, TorusFn)], t_end: f64, kmax: usize) -> Result<f64> {
    let mut acc = MixedNormAccumulator::new(NormMode::Sampled, path.first().map_or(0.0, |p| p.0));
    for (t, z) in path.iter().filter(|(t, _)| *t <= t_end) {
        let s = z.fourier(kmax);
        acc.push(*t, s.hs_norm_sq(-1.0), s.hs_norm_sq(0.0))?;
    }
    Ok(acc.value())
}
