//! Functions on the discrete torus `{j/M : 0 <= j < M}`.
//!
//! Holds the grid field type, the periodic second-difference operator
//! `(Δ_M u)_j = M²(u_{j+1} + u_{j-1} - 2u_j)`, its inverse on mean-free
//! functions (diagonalised by the DFT, eigenvalues `-4M² sin²(πk/M)`), and the
//! discrete norms built on top of it:
//!
//! * `‖u‖_{p,M} = ((1/M) Σ |u_j|^p)^{1/p}`
//! * `⟨u, v⟩_{-1,M} = [u][v] + ⟨u - [u], -Δ_M⁻¹(v - [v])⟩_{2,M}`
//!
//! [`HMinusOneAccumulator`] tracks the `-1` norm of a field under sparse
//! updates in `O(M)` per update by shifting a single stored column of `Δ_M⁻¹`.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on `[u]_M / ‖u‖_{2,M}` accepted as mean-free.
pub const MEAN_FREE_TOL: f64 = 1e-10;

/// A real function on the discrete torus; site `j` sits at `x_j = j/M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridFn {
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "a grid function needs at least one site");
        Self { values }
    }

    pub fn zeros(m: usize) -> Self {
        Self::new(vec![0.0; m])
    }

    pub fn constant(m: usize, c: f64) -> Self {
        Self::new(vec![c; m])
    }

    /// Canonical basis vector `e_i` (indices taken mod `m`).
    pub fn basis(m: usize, i: usize) -> Self {
        let mut g = Self::zeros(m);
        g.values[i % m] = 1.0;
        g
    }

    /// Samples `f` at the grid points `x_j = j/m`.
    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Self {
        Self::new((0..m).map(|j| f(j as f64 / m as f64)).collect())
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at a periodic index.
    #[inline]
    pub fn at(&self, j: isize) -> f64 {
        let m = self.m() as isize;
        self.values[j.rem_euclid(m) as usize]
    }

    /// `[u]_M`.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.m() as f64
    }

    pub fn mean_free(&self) -> GridFn {
        let mean = self.mean();
        GridFn::new(self.values.iter().map(|v| v - mean).collect())
    }

    /// `⟨u, v⟩_{2,M}`.
    pub fn dot(&self, other: &GridFn) -> f64 {
        debug_assert_eq!(self.m(), other.m());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / self.m() as f64
    }

    pub fn norm_p(&self, p: f64) -> f64 {
        norm_p(self, p)
    }

    /// Cyclic shift: `out_j = u_{j - k}`, so `e_0.shifted(k) = e_k`.
    pub fn shifted(&self, k: isize) -> GridFn {
        let m = self.m();
        let k = k.rem_euclid(m as isize) as usize;
        let mut out = vec![0.0; m];
        for (j, v) in self.values.iter().enumerate() {
            out[(j + k) % m] = *v;
        }
        GridFn::new(out)
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &GridFn) {
        debug_assert_eq!(self.m(), x.m());
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFn {
        GridFn::new(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &GridFn, f: impl Fn(f64, f64) -> f64) -> GridFn {
        debug_assert_eq!(self.m(), other.m());
        GridFn::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }
}

impl Index<usize> for GridFn {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.values[j]
    }
}

impl IndexMut<usize> for GridFn {
    fn index_mut(&mut self, j: usize) -> &mut f64 {
        &mut self.values[j]
    }
}

impl Add<&GridFn> for &GridFn {
    type Output = GridFn;
    fn add(self, rhs: &GridFn) -> GridFn {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub<&GridFn> for &GridFn {
    type Output = GridFn;
    fn sub(self, rhs: &GridFn) -> GridFn {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &GridFn {
    type Output = GridFn;
    fn mul(self, c: f64) -> GridFn {
        self.map(|v| c * v)
    }
}

impl Neg for &GridFn {
    type Output = GridFn;
    fn neg(self) -> GridFn {
        self.map(|v| -v)
    }
}

impl AddAssign<&GridFn> for GridFn {
    fn add_assign(&mut self, rhs: &GridFn) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&GridFn> for GridFn {
    fn sub_assign(&mut self, rhs: &GridFn) {
        self.axpy(-1.0, rhs);
    }
}

/// `Δ_M u` with periodic wraparound.
pub fn laplacian_apply(u: &GridFn) -> GridFn {
    let m = u.m();
    let m2 = (m * m) as f64;
    let v = u.values();
    let out = (0..m)
        .map(|j| {
            let left = v[(j + m - 1) % m];
            let right = v[(j + 1) % m];
            m2 * ((right - v[j]) - (v[j] - left))
        })
        .collect();
    GridFn::new(out)
}

/// Discrete `ℓ^p` norm; `p = f64::INFINITY` gives the sup norm.
pub fn norm_p(u: &GridFn, p: f64) -> f64 {
    assert!(p >= 1.0, "norm exponent must be >= 1");
    if p.is_infinite() {
        return u.max_abs();
    }
    let m = u.m() as f64;
    if p == 1.0 {
        return u.iter().map(|v| v.abs()).sum::<f64>() / m;
    }
    if p == 2.0 {
        return (u.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
    }
    (u.iter().map(|v| v.abs().powf(p)).sum::<f64>() / m).powf(1.0 / p)
}

/// Eigen-data of `Δ_M` plus FFT plans; immutable once built.
pub struct SpectralPlan {
    m: usize,
    eigenvalues: Vec<f64>,
    green_column: GridFn,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("m", &self.m)
            .field("eigenvalues", &self.eigenvalues)
            .finish_non_exhaustive()
    }
}

impl SpectralPlan {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::TooFewSites(m));
        }
        let mf = m as f64;
        let eigenvalues = (0..m)
            .map(|k| {
                let s = (std::f64::consts::PI * k as f64 / mf).sin();
                4.0 * mf * mf * s * s
            })
            .collect();
        // Mean-free solution of Δ_M g = e_0 - 1/M, in closed form:
        // g_j = j(M - j)/(2M³) - (M² - 1)/(12M³).
        let m3 = mf * mf * mf;
        let green_column = GridFn::new(
            (0..m)
                .map(|j| {
                    let j = j as f64;
                    j * (mf - j) / (2.0 * m3) - (mf * mf - 1.0) / (12.0 * m3)
                })
                .collect(),
        );
        let mut planner = FftPlanner::new();
        Ok(Self {
            m,
            eigenvalues,
            green_column,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        })
    }

    pub fn shared(m: usize) -> Result<Arc<Self>> {
        Self::new(m).map(Arc::new)
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    /// `λ_k = 4M² sin²(πk/M)`, the spectrum of `-Δ_M`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Mean-free `g` with `Δ_M g = e_0 - [e_0]`. Column `j` of `Δ_M⁻¹` is
    /// `green_column().shifted(j)`.
    pub fn green_column(&self) -> &GridFn {
        &self.green_column
    }

    /// `‖e_j‖²_{-1,M}`, identical for every site.
    pub fn site_norm_sq(&self) -> f64 {
        let mf = self.m as f64;
        1.0 / (mf * mf) - self.green_column[0] / mf
    }

    /// `‖a e_i + b e_k‖²_{-1,M}` in `O(1)` from the stored column.
    pub fn pair_norm_sq(&self, i: usize, a: f64, k: usize, b: f64) -> f64 {
        let mf = self.m as f64;
        let g0 = self.green_column[0];
        let gik = self.green_column[(k + self.m - i) % self.m];
        let mean = (a + b) / mf;
        mean * mean - (a * a * g0 + 2.0 * a * b * gik + b * b * g0) / mf
    }

    pub fn dft(&self, u: &GridFn) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn inverse_dft_real(&self, mut buf: Vec<Complex<f64>>) -> GridFn {
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.m as f64;
        GridFn::new(buf.into_iter().map(|c| c.re * scale).collect())
    }

    fn check(&self, u: &GridFn) -> Result<()> {
        if u.m() != self.m {
            return Err(Error::SizeMismatch {
                expected: self.m,
                got: u.m(),
            });
        }
        Ok(())
    }

    /// Unique mean-free `v` with `Δ_M v = u`; `u` must itself be mean-free.
    pub fn invert(&self, u: &GridFn) -> Result<GridFn> {
        self.check(u)?;
        let mean = u.mean();
        let tol = MEAN_FREE_TOL * norm_p(u, 2.0);
        if mean.abs() > tol && mean != 0.0 {
            return Err(Error::NotMeanFree { mean, tol });
        }
        Ok(self.solve_mean_free(u, -1.0))
    }

    /// `-Δ_M⁻¹(u - [u])`: the potential entering the `-1` inner product.
    pub fn potential(&self, u: &GridFn) -> GridFn {
        assert_eq!(u.m(), self.m, "grid size mismatch");
        self.solve_mean_free(u, 1.0)
    }

    fn solve_mean_free(&self, u: &GridFn, sign: f64) -> GridFn {
        let mut buf = self.dft(u);
        buf[0] = Complex::new(0.0, 0.0);
        for (c, &lambda) in buf.iter_mut().zip(&self.eigenvalues).skip(1) {
            *c *= sign / lambda;
        }
        self.inverse_dft_real(buf)
    }

    /// `⟨u, v⟩_{-1,M}`.
    pub fn inner(&self, u: &GridFn, v: &GridFn) -> f64 {
        u.mean() * v.mean() + u.dot(&self.potential(v))
    }

    /// `‖u‖²_{-1,M}`.
    pub fn norm_sq(&self, u: &GridFn) -> f64 {
        self.inner(u, u)
    }
}

/// Free-function form of [`SpectralPlan::invert`].
pub fn laplacian_invert(u: &GridFn, plan: &SpectralPlan) -> Result<GridFn> {
    plan.invert(u)
}

/// `‖u‖²_{-1,M} = [u]² + ⟨ũ, -Δ_M⁻¹ũ⟩_{2,M}`.
pub fn h_minus1_norm_sq(u: &GridFn, plan: &SpectralPlan) -> f64 {
    plan.norm_sq(u)
}

pub fn h_minus1_inner(u: &GridFn, v: &GridFn, plan: &SpectralPlan) -> f64 {
    plan.inner(u, v)
}

/// Incrementally maintained `‖f‖²_{-1,M}` for a field `f` under sparse and
/// rank-one updates.
///
/// Invariant: `potential = -Δ_M⁻¹(field - [field])` and
/// `norm_sq = [field]² + ⟨field, potential⟩_{2,M}` (up to rounding; call
/// [`rebuild`](Self::rebuild) periodically).
#[derive(Clone, Debug)]
pub struct HMinusOneAccumulator {
    plan: Arc<SpectralPlan>,
    field: GridFn,
    potential: GridFn,
    sum: f64,
    norm_sq: f64,
}

impl HMinusOneAccumulator {
    pub fn new(plan: Arc<SpectralPlan>, field: GridFn) -> Self {
        assert_eq!(field.m(), plan.m(), "grid size mismatch");
        let mut acc = Self {
            potential: GridFn::zeros(plan.m()),
            plan,
            field,
            sum: 0.0,
            norm_sq: 0.0,
        };
        acc.rebuild();
        acc
    }

    pub fn zero(plan: Arc<SpectralPlan>) -> Self {
        let m = plan.m();
        Self::new(plan, GridFn::zeros(m))
    }

    pub fn plan(&self) -> &Arc<SpectralPlan> {
        &self.plan
    }

    pub fn field(&self) -> &GridFn {
        &self.field
    }

    pub fn potential(&self) -> &GridFn {
        &self.potential
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.plan.m() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    /// Recomputes potential, mean and norm from the stored field.
    pub fn rebuild(&mut self) {
        self.potential = self.plan.potential(&self.field);
        self.sum = self.field.iter().sum();
        let mean = self.mean();
        self.norm_sq = mean * mean + self.field.dot(&self.potential);
    }

    /// Replaces the field wholesale.
    pub fn reset(&mut self, field: GridFn) {
        assert_eq!(field.m(), self.plan.m(), "grid size mismatch");
        self.field = field;
        self.rebuild();
    }

    /// `⟨field, a e_j⟩_{-1,M}`.
    #[inline]
    pub fn inner_site(&self, j: usize, a: f64) -> f64 {
        let mf = self.plan.m() as f64;
        a * (self.mean() + self.potential[j]) / mf
    }

    /// `⟨field, other⟩_{-1,M}` using the stored potentials.
    pub fn inner(&self, other: &HMinusOneAccumulator) -> f64 {
        self.mean() * other.mean() + self.field.dot(&other.potential)
    }

    /// `field += a e_j`.
    pub fn add_site(&mut self, j: usize, a: f64) {
        if a == 0.0 {
            return;
        }
        let m = self.plan.m();
        let cross = self.inner_site(j, a);
        self.norm_sq += 2.0 * cross + a * a * self.plan.site_norm_sq();
        self.field[j] += a;
        self.sum += a;
        // potential = -Σ_i f_i · green.shifted(i)
        let g = self.plan.green_column.values();
        let pot = self.potential.values_mut();
        let (head, tail) = pot.split_at_mut(j);
        for (p, gv) in tail.iter_mut().zip(g) {
            *p -= a * gv;
        }
        for (p, gv) in head.iter_mut().zip(&g[m - j..]) {
            *p -= a * gv;
        }
    }

    /// Applies a sparse increment given as `(site, value)` pairs.
    pub fn increment(&mut self, delta: &[(usize, f64)]) {
        for &(j, a) in delta {
            self.add_site(j, a);
        }
    }

    /// `field += c * other.field`.
    pub fn axpy(&mut self, c: f64, other: &HMinusOneAccumulator) {
        if c == 0.0 {
            return;
        }
        let cross = self.inner(other);
        self.norm_sq += 2.0 * c * cross + c * c * other.norm_sq;
        self.field.axpy(c, &other.field);
        self.potential.axpy(c, &other.potential);
        self.sum += c * other.sum;
    }

    /// Fresh `‖field‖²_{-1,M}` computed spectrally, for drift checks.
    pub fn recomputed_norm_sq(&self) -> f64 {
        self.plan.norm_sq(&self.field)
    }
}

/// Free-function form of [`HMinusOneAccumulator::increment`].
pub fn h_minus1_increment(acc: &mut HMinusOneAccumulator, delta: &[(usize, f64)]) {
    acc.increment(delta);
}
