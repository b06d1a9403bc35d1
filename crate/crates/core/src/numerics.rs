//! Deterministic matrix-valued integration primitives.
//!
//! Everything here runs on a fixed uniform grid with classical fourth-order
//! Runge–Kutta, so results are bitwise reproducible for identical inputs.
//! Covariance and Riccati flows are symmetrized after every step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Minimum-eigenvalue tolerance used when validating PSD inputs.
pub const TOL_PSD: f64 = 1e-9;

/// Default magnitude at which a Riccati solution is declared to have escaped.
pub const DEFAULT_BLOW_UP: f64 = 1e12;

/// Uniform discretization of `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::NonFinite {
                what: "time grid bounds".into(),
            });
        }
        if t_end <= t_start {
            return Err(Error::Parameter(format!(
                "time grid needs t_end > t_start (got [{t_start}, {t_end}])"
            )));
        }
        if steps == 0 {
            return Err(Error::Parameter("time grid needs at least one step".into()));
        }
        Ok(Self {
            t_start,
            t_end,
            steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Node `k`; the last node is `t_end` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t_start + (self.t_end - self.t_start) * (k as f64) / (self.steps as f64)
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.time(k))
    }

    /// Same step count, shifted by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            t_start: self.t_start + offset,
            t_end: self.t_end + offset,
            steps: self.steps,
        }
    }

    /// Every node split into `factor` sub-steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t_start: self.t_start,
            t_end: self.t_end,
            steps: self.steps * factor.max(1),
        }
    }

    /// Index of node `t` if it lies on the grid (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t_start) / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        if (x - k).abs() <= 1e-9 * (1.0 + k) {
            Some(k as usize)
        } else {
            None
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = 1e-12 * (self.t_end - self.t_start).abs().max(1.0);
        t >= self.t_start - tol && t <= self.t_end + tol
    }
}

/// A deterministic matrix-valued function of time.
pub trait MatrixFn: Send + Sync {
    fn eval(&self, t: f64) -> Mat;
    fn shape(&self) -> (usize, usize);
}

/// Adapter turning a closure into a [`MatrixFn`].
pub struct FnMatrix<F> {
    rows: usize,
    cols: usize,
    f: F,
}

impl<F> FnMatrix<F>
where
    F: Fn(f64) -> Mat + Send + Sync,
{
    pub fn new(rows: usize, cols: usize, f: F) -> Self {
        Self { rows, cols, f }
    }
}

impl<F> MatrixFn for FnMatrix<F>
where
    F: Fn(f64) -> Mat + Send + Sync,
{
    fn eval(&self, t: f64) -> Mat {
        (self.f)(t)
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

impl MatrixFn for Mat {
    fn eval(&self, _t: f64) -> Mat {
        self.clone()
    }

    fn shape(&self) -> (usize, usize) {
        self.shape()
    }
}

impl<T: MatrixFn + ?Sized> MatrixFn for Arc<T> {
    fn eval(&self, t: f64) -> Mat {
        (**self).eval(t)
    }

    fn shape(&self) -> (usize, usize) {
        (**self).shape()
    }
}

impl<T: MatrixFn + ?Sized> MatrixFn for &T {
    fn eval(&self, t: f64) -> Mat {
        (**self).eval(t)
    }

    fn shape(&self) -> (usize, usize) {
        (**self).shape()
    }
}

/// Matrix samples on a [`TimeGrid`], one per node, linearly interpolated
/// between nodes and clamped outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    values: Vec<Mat>,
}

/// Time-indexed covariance matrices.
pub type CovarianceTrajectory = MatrixPath;

impl MatrixPath {
    pub fn new(grid: TimeGrid, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Grid(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let shape = values[0].shape();
        if let Some(bad) = values.iter().find(|m| m.shape() != shape) {
            return Err(Error::Shape {
                what: "matrix path sample".into(),
                expected: shape,
                got: bad.shape(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node of `grid`.
    pub fn sample(f: &dyn MatrixFn, grid: TimeGrid) -> Self {
        let values = grid.times().map(|t| f.eval(t)).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        &self.values[self.values.len() - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Mat)> {
        self.grid.times().zip(self.values.iter())
    }

    pub fn map<F: Fn(f64, &Mat) -> Mat>(&self, f: F) -> Self {
        let values = self.iter().map(|(t, m)| f(t, m)).collect();
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Largest entrywise asymmetry `max |M - Mᵀ|` over the path.
    pub fn max_asymmetry(&self) -> f64 {
        self.values
            .iter()
            .map(|m| (m - m.transpose()).amax())
            .fold(0.0, f64::max)
    }

    pub fn interpolate(&self, t: f64) -> Mat {
        let dt = self.grid.dt();
        let x = ((t - self.grid.t_start) / dt).clamp(0.0, self.grid.steps as f64);
        let k = (x.floor() as usize).min(self.grid.steps - 1);
        let w = x - k as f64;
        if w <= 0.0 {
            return self.values[k].clone();
        }
        if w >= 1.0 {
            return self.values[k + 1].clone();
        }
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }
}

impl MatrixFn for MatrixPath {
    fn eval(&self, t: f64) -> Mat {
        self.interpolate(t)
    }

    fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub(crate) fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into() })
    }
}

pub(crate) fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(Error::Shape {
            what: what.into(),
            expected: (m.nrows(), m.nrows()),
            got: m.shape(),
        })
    }
}

/// Fails unless `m` is symmetric (relative 1e-9) with min eigenvalue ≥ −`TOL_PSD`.
pub(crate) fn ensure_psd(m: &Mat, what: &str) -> Result<()> {
    ensure_finite(m, what)?;
    ensure_square(m, what)?;
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 * m.amax().max(1.0) {
        return Err(Error::Domain(format!("{what} is not symmetric (asymmetry {asym:e})")));
    }
    let lo = min_eigenvalue(m);
    if lo < -TOL_PSD {
        return Err(Error::Domain(format!(
            "{what} is not positive semidefinite (min eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_spd(m: &Mat, what: &str) -> Result<()> {
    ensure_psd(m, what)?;
    let lo = min_eigenvalue(m);
    if lo <= 0.0 {
        return Err(Error::Domain(format!(
            "{what} is not positive definite (min eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

pub(crate) fn rk4_step<F>(f: &F, t: f64, y: &Mat, dt: f64) -> Mat
where
    F: Fn(f64, &Mat) -> Mat,
{
    let half = 0.5 * dt;
    let k1 = f(t, y);
    let k2 = f(t + half, &(y + &k1 * half));
    let k3 = f(t + half, &(y + &k2 * half));
    let k4 = f(t + dt, &(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Φ_M(t, s): solution at `t` of dΦ/dτ = M(τ)Φ with Φ(s, s) = I.
///
/// `t < s` integrates in reverse time, which yields Φ_M(s, t)⁻¹.
pub fn fundamental_matrix(m: &dyn MatrixFn, s: f64, t: f64, steps: usize) -> Result<Mat> {
    if steps == 0 {
        return Err(Error::Parameter("fundamental_matrix needs steps >= 1".into()));
    }
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::Shape {
            what: "fundamental matrix generator".into(),
            expected: (rows, rows),
            got: (rows, cols),
        });
    }
    let mut phi = Mat::identity(rows, rows);
    if s == t {
        return Ok(phi);
    }
    let dt = (t - s) / steps as f64;
    let rhs = |tau: f64, y: &Mat| {
        let a = m.eval(tau);
        a * y
    };
    for k in 0..steps {
        let tau = s + (t - s) * (k as f64) / (steps as f64);
        let a0 = m.eval(tau);
        ensure_finite(&a0, "fundamental matrix generator")?;
        if a0.shape() != (rows, rows) {
            return Err(Error::Shape {
                what: "fundamental matrix generator sample".into(),
                expected: (rows, rows),
                got: a0.shape(),
            });
        }
        phi = rk4_step(&rhs, tau, &phi, dt);
    }
    ensure_finite(&phi, "fundamental matrix")?;
    Ok(phi)
}

/// Stored fundamental matrices of a generator on a uniform grid.
///
/// Holds Φ(t_k, t₀) and Φ(t₀, t_k) for every node; off-grid times are
/// reached with one partial RK4 step from the nearest node, and
/// Φ(t, s) = Φ(t, t₀)·Φ(t₀, s).
pub struct Flow {
    generator: Arc<dyn MatrixFn>,
    grid: TimeGrid,
    forward: Vec<Mat>,
    backward: Vec<Mat>,
}

impl std::fmt::Debug for Flow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Flow")
            .field("grid", &self.grid)
            .field("dim", &self.dim())
            .finish()
    }
}

impl Flow {
    pub fn new(generator: Arc<dyn MatrixFn>, grid: TimeGrid) -> Result<Self> {
        let (n, c) = generator.shape();
        if n != c {
            return Err(Error::Shape {
                what: "flow generator".into(),
                expected: (n, n),
                got: (n, c),
            });
        }
        let dt = grid.dt();
        let mut forward = Vec::with_capacity(grid.len());
        let mut backward = Vec::with_capacity(grid.len());
        forward.push(Mat::identity(n, n));
        backward.push(Mat::identity(n, n));
        let fwd_rhs = |t: f64, y: &Mat| generator.eval(t) * y;
        let bwd_rhs = |t: f64, y: &Mat| -(y * generator.eval(t));
        for k in 0..grid.steps() {
            let t = grid.time(k);
            ensure_finite(&generator.eval(t), "flow generator")?;
            let f = rk4_step(&fwd_rhs, t, &forward[k], dt);
            let b = rk4_step(&bwd_rhs, t, &backward[k], dt);
            forward.push(f);
            backward.push(b);
        }
        ensure_finite(&generator.eval(grid.t_end()), "flow generator")?;
        if forward.iter().chain(backward.iter()).any(|m| !m.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite {
                what: "fundamental matrix".into(),
            });
        }
        Ok(Self {
            generator,
            grid,
            forward,
            backward,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.forward[0].nrows()
    }

    fn nearest(&self, t: f64) -> usize {
        let x = (t - self.grid.t_start()) / self.grid.dt();
        (x.round().max(0.0) as usize).min(self.grid.steps())
    }

    /// Φ(t, t₀).
    pub fn from_origin(&self, t: f64) -> Mat {
        let k = self.nearest(t);
        let tk = self.grid.time(k);
        if t == tk {
            return self.forward[k].clone();
        }
        let rhs = |tau: f64, y: &Mat| self.generator.eval(tau) * y;
        rk4_step(&rhs, tk, &self.forward[k], t - tk)
    }

    /// Φ(t₀, t).
    pub fn to_origin(&self, t: f64) -> Mat {
        let k = self.nearest(t);
        let tk = self.grid.time(k);
        if t == tk {
            return self.backward[k].clone();
        }
        let rhs = |tau: f64, y: &Mat| -(y * self.generator.eval(tau));
        rk4_step(&rhs, tk, &self.backward[k], t - tk)
    }

    /// Φ(t, s) for any `t`, `s` covered by the grid.
    pub fn transition(&self, t: f64, s: f64) -> Mat {
        if t == s {
            return Mat::identity(self.dim(), self.dim());
        }
        self.from_origin(t) * self.to_origin(s)
    }
}

/// Composite Simpson approximation of ∫ₐᵇ f(s) ds, entrywise.
pub fn matrix_quadrature<F>(f: F, a: f64, b: f64, steps: usize) -> Result<Mat>
where
    F: Fn(f64) -> Mat,
{
    if steps == 0 || steps % 2 != 0 {
        return Err(Error::Parameter(format!(
            "Simpson quadrature needs a positive even step count (got {steps})"
        )));
    }
    if !(a <= b) {
        return Err(Error::Parameter(format!("quadrature needs a <= b (got [{a}, {b}])")));
    }
    let h = (b - a) / steps as f64;
    let mut acc: Option<Mat> = None;
    for k in 0..=steps {
        let s = if k == steps { b } else { a + h * k as f64 };
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let v = f(s);
        ensure_finite(&v, "quadrature integrand")?;
        match acc.as_mut() {
            Some(m) => *m += v * w,
            None => acc = Some(v * w),
        }
    }
    Ok(acc.expect("at least one node") * (h / 3.0))
}

/// Simpson (even step count) or trapezoid rule over equally spaced scalar samples.
pub(crate) fn integrate_samples(values: &[f64], dt: f64) -> f64 {
    let steps = values.len().saturating_sub(1);
    if steps == 0 {
        return 0.0;
    }
    if steps % 2 == 0 {
        let mut s = values[0] + values[steps];
        for (k, v) in values.iter().enumerate().take(steps).skip(1) {
            s += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        s * dt / 3.0
    } else {
        let inner: f64 = values[1..steps].iter().sum();
        (0.5 * (values[0] + values[steps]) + inner) * dt
    }
}

/// Covariance flow dΣ/dt = A_cl Σ + Σ A_clᵀ + D on `grid`.
pub fn propagate_lyapunov(
    a_cl: &dyn MatrixFn,
    diffusion: &dyn MatrixFn,
    sigma0: &Mat,
    grid: TimeGrid,
) -> Result<CovarianceTrajectory> {
    ensure_psd(sigma0, "initial covariance")?;
    let n = sigma0.nrows();
    if a_cl.shape() != (n, n) || diffusion.shape() != (n, n) {
        return Err(Error::Shape {
            what: "Lyapunov coefficients".into(),
            expected: (n, n),
            got: a_cl.shape(),
        });
    }
    let rhs = |t: f64, s: &Mat| {
        let a = a_cl.eval(t);
        let a_s = &a * s;
        &a_s + a_s.transpose() + diffusion.eval(t)
    };
    let dt = grid.dt();
    let mut values = Vec::with_capacity(grid.len());
    values.push(symmetrize(sigma0));
    for k in 0..grid.steps() {
        let next = symmetrize(&adaptive_rk4(&rhs, grid.time(k), &values[k], dt, 0));
        ensure_finite(&next, "covariance")?;
        values.push(next);
    }
    MatrixPath::new(grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiccatiDirection {
    /// Boundary value imposed at the grid start.
    ForwardFromInitial,
    /// Boundary value imposed at the grid end, integrated in reversed time.
    BackwardFromTerminal,
}

/// Coefficients of Π̇ = −AᵀΠ − ΠA − Q̄ + Π B̄ R⁻¹ B̄ᵀ Π.
pub struct RiccatiCoefficients<'a> {
    pub a: &'a dyn MatrixFn,
    pub bbar: &'a dyn MatrixFn,
    pub r_inv: &'a dyn MatrixFn,
    /// `None` is the steering variant (Q̄ ≡ 0).
    pub qbar: Option<&'a dyn MatrixFn>,
}

impl RiccatiCoefficients<'_> {
    fn rhs(&self, t: f64, p: &Mat) -> Mat {
        let a = self.a.eval(t);
        let b = self.bbar.eval(t);
        let pa = p * &a;
        let pb = p * &b;
        let mut d = pb.clone() * self.r_inv.eval(t) * pb.transpose() - &pa - pa.transpose();
        if let Some(q) = self.qbar {
            d -= q.eval(t);
        }
        d
    }
}

const LOCAL_TOL: f64 = 1e-11;
const MAX_BISECTIONS: u32 = 40;

/// One RK4 step, bisected until a full step and two half steps agree.
fn adaptive_rk4<F>(rhs: &F, t: f64, y: &Mat, dt: f64, depth: u32) -> Mat
where
    F: Fn(f64, &Mat) -> Mat,
{
    let full = rk4_step(rhs, t, y, dt);
    let mid = rk4_step(rhs, t, y, 0.5 * dt);
    let two = rk4_step(rhs, t + 0.5 * dt, &mid, 0.5 * dt);
    let err = (&two - &full).amax();
    if depth >= MAX_BISECTIONS || err <= LOCAL_TOL * (1.0 + y.amax()) {
        return &two + (&two - &full) / 15.0;
    }
    let half = adaptive_rk4(rhs, t, y, 0.5 * dt, depth + 1);
    adaptive_rk4(rhs, t + 0.5 * dt, &half, 0.5 * dt, depth + 1)
}

pub fn solve_riccati(
    coeffs: &RiccatiCoefficients<'_>,
    boundary: &Mat,
    direction: RiccatiDirection,
    grid: TimeGrid,
    blow_up: f64,
) -> Result<MatrixPath> {
    ensure_finite(boundary, "Riccati boundary value")?;
    ensure_square(boundary, "Riccati boundary value")?;
    let n = boundary.nrows();
    let (bn, m) = coeffs.bbar.shape();
    if coeffs.a.shape() != (n, n) || bn != n || coeffs.r_inv.shape() != (m, m) {
        return Err(Error::Shape {
            what: "Riccati coefficients".into(),
            expected: (n, m),
            got: (bn, m),
        });
    }
    let rhs = |t: f64, p: &Mat| coeffs.rhs(t, p);
    let dt = grid.dt();
    let steps = grid.steps();
    let mut values = vec![Mat::zeros(n, n); grid.len()];
    let check = |p: &Mat, t: f64| -> Result<()> {
        if p.iter().all(|x| x.is_finite() && x.abs() <= blow_up) {
            Ok(())
        } else {
            Err(Error::RiccatiBlowUp {
                time: t,
                threshold: blow_up,
            })
        }
    };
    match direction {
        RiccatiDirection::ForwardFromInitial => {
            values[0] = symmetrize(boundary);
            for k in 0..steps {
                let next = symmetrize(&adaptive_rk4(&rhs, grid.time(k), &values[k], dt, 0));
                check(&next, grid.time(k + 1))?;
                values[k + 1] = next;
            }
        }
        RiccatiDirection::BackwardFromTerminal => {
            values[steps] = symmetrize(boundary);
            for k in (1..=steps).rev() {
                let next = symmetrize(&adaptive_rk4(&rhs, grid.time(k), &values[k], -dt, 0));
                check(&next, grid.time(k - 1))?;
                values[k - 1] = next;
            }
        }
    }
    MatrixPath::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn zero_generator_gives_identity() {
        let m = Mat::zeros(2, 2);
        let phi = fundamental_matrix(&m, 0.0, 3.0, 10).unwrap();
        assert_eq!(phi, Mat::identity(2, 2));
    }

    #[test]
    fn nilpotent_generator() {
        let m = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let phi = fundamental_matrix(&m, 0.0, 1.0, 10).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((phi - expected).amax() < 1e-14);
    }

    #[test]
    fn scalar_time_varying_generator_matches_integrating_factor() {
        let m = FnMatrix::new(1, 1, scalar);
        let phi = fundamental_matrix(&m, 0.0, 2.0, 2000).unwrap();
        assert!((phi[(0, 0)] - 2f64.exp()).abs() < 1e-8);
        let back = fundamental_matrix(&m, 2.0, 0.0, 2000).unwrap();
        assert!((back[(0, 0)] * phi[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fundamental_matrix_rejects_non_finite_and_bad_shape() {
        let m = FnMatrix::new(1, 1, |_| scalar(f64::NAN));
        assert!(matches!(
            fundamental_matrix(&m, 0.0, 1.0, 4),
            Err(Error::NonFinite { .. })
        ));
        let rect = Mat::zeros(2, 3);
        assert!(matches!(
            fundamental_matrix(&rect, 0.0, 1.0, 4),
            Err(Error::Shape { .. })
        ));
        assert!(fundamental_matrix(&scalar(0.0), 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn flow_matches_direct_integration() {
        let a = Arc::new(FnMatrix::new(2, 2, |t: f64| {
            Mat::from_row_slice(2, 2, &[-0.3, t.sin(), 0.2, -0.1 * t])
        }));
        let flow = Flow::new(a.clone(), TimeGrid::new(0.0, 3.0, 3000).unwrap()).unwrap();
        let direct = fundamental_matrix(a.as_ref(), 0.7, 2.35, 4000).unwrap();
        assert!((flow.transition(2.35, 0.7) - direct).norm() < 1e-9);
        let inverse = fundamental_matrix(a.as_ref(), 2.35, 0.7, 4000).unwrap();
        assert!((flow.transition(0.7, 2.35) - inverse).norm() < 1e-9);
    }

    #[test]
    fn simpson_constant_and_polynomial() {
        let i = matrix_quadrature(|_| Mat::identity(3, 3), 0.0, 2.0, 2).unwrap();
        assert!((i - Mat::identity(3, 3) * 2.0).amax() < 1e-15);
        let c = matrix_quadrature(|s| scalar(s * s), 0.0, 1.0, 2).unwrap();
        assert!((c[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn simpson_exponential_integrand() {
        let a = -0.5f64;
        let v = matrix_quadrature(|s| scalar((2.0 * a * s).exp()), 0.0, 1.0, 200).unwrap();
        let exact = (1.0 - (2.0 * a).exp()) / (-2.0 * a);
        assert!((v[(0, 0)] - exact).abs() < 1e-6);
        assert!((v[(0, 0)] - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn simpson_rejects_odd_steps_and_nan() {
        assert!(matches!(
            matrix_quadrature(|_| scalar(1.0), 0.0, 1.0, 3),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            matrix_quadrature(|_| scalar(f64::INFINITY), 0.0, 1.0, 2),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn lyapunov_zero_noise_stays_zero() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let path = propagate_lyapunov(&a, &Mat::zeros(2, 2), &Mat::zeros(2, 2), grid).unwrap();
        assert!(path.values().iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn lyapunov_scalar_ou() {
        let grid = TimeGrid::new(0.0, 2.0, 400).unwrap();
        let path = propagate_lyapunov(&scalar(-1.0), &scalar(1.0), &scalar(0.0), grid).unwrap();
        let exact = (1.0 - (-4f64).exp()) / 2.0;
        assert!((path.last()[(0, 0)] - exact).abs() < 1e-6);
    }

    #[test]
    fn lyapunov_pure_diffusion() {
        let grid = TimeGrid::new(0.0, 1.5, 30).unwrap();
        let s = Vector::from_vec(vec![0.5, -1.0]);
        let d = &s * s.transpose();
        let path = propagate_lyapunov(&Mat::zeros(2, 2), &d, &Mat::zeros(2, 2), grid).unwrap();
        for (t, m) in path.iter() {
            assert!((m - &d * t).amax() < 1e-12);
        }
    }

    #[test]
    fn lyapunov_rejects_indefinite_initial_covariance() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(
            propagate_lyapunov(&Mat::zeros(2, 2), &Mat::zeros(2, 2), &bad, grid),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn riccati_zero_is_fixed_point_of_steering_variant() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let coeffs = RiccatiCoefficients {
            a: &a,
            bbar: &b,
            r_inv: &scalar(1.0),
            qbar: None,
        };
        let path = solve_riccati(
            &coeffs,
            &Mat::zeros(2, 2),
            RiccatiDirection::ForwardFromInitial,
            grid,
            DEFAULT_BLOW_UP,
        )
        .unwrap();
        assert!(path.values().iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn riccati_backward_tanh() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let coeffs = RiccatiCoefficients {
            a: &scalar(0.0),
            bbar: &scalar(1.0),
            r_inv: &scalar(1.0),
            qbar: Some(&scalar(1.0)),
        };
        let path = solve_riccati(
            &coeffs,
            &scalar(0.0),
            RiccatiDirection::BackwardFromTerminal,
            grid,
            DEFAULT_BLOW_UP,
        )
        .unwrap();
        for (t, p) in path.iter() {
            assert!((p[(0, 0)] - (1.0 - t).tanh()).abs() < 1e-6);
        }
    }

    #[test]
    fn riccati_forward_separable() {
        let grid = TimeGrid::new(0.0, 0.5, 500).unwrap();
        let coeffs = RiccatiCoefficients {
            a: &scalar(0.0),
            bbar: &scalar(1.0),
            r_inv: &scalar(1.0),
            qbar: None,
        };
        let path = solve_riccati(
            &coeffs,
            &scalar(1.0),
            RiccatiDirection::ForwardFromInitial,
            grid,
            DEFAULT_BLOW_UP,
        )
        .unwrap();
        assert!((path.last()[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn riccati_reports_escape_time() {
        // Π̇ = Π² from Π₀ = 1 escapes at t = 1.
        let grid = TimeGrid::new(0.0, 2.0, 2000).unwrap();
        let coeffs = RiccatiCoefficients {
            a: &scalar(0.0),
            bbar: &scalar(1.0),
            r_inv: &scalar(1.0),
            qbar: None,
        };
        match solve_riccati(
            &coeffs,
            &scalar(1.0),
            RiccatiDirection::ForwardFromInitial,
            grid,
            1e6,
        ) {
            Err(Error::RiccatiBlowUp { time, .. }) => assert!((time - 1.0).abs() < 0.01),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn matrix_path_interpolates_linearly() {
        let grid = TimeGrid::new(0.0, 2.0, 2).unwrap();
        let path = MatrixPath::new(grid, vec![scalar(0.0), scalar(2.0), scalar(6.0)]).unwrap();
        assert_eq!(path.eval(1.0)[(0, 0)], 2.0);
        assert!((path.eval(0.25)[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((path.eval(1.5)[(0, 0)] - 4.0).abs() < 1e-15);
        assert_eq!(path.eval(5.0)[(0, 0)], 6.0);
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
        assert_eq!(g.index_of(2.0 / 3.0), Some(2));
        assert_eq!(g.index_of(0.5), None);
    }
}
