//! Input-delayed linear SDE model, configuration loading, the zero-mean
//! reduction, the Artstein input matrix and the drift-compensating
//! feedforward.
//!
//! The system is
//!
//! ```text
//! dX = (A(t) X + B(t) U(t - h) + r(t)) dt + σ(t) dW,   X(0) = X₀,   U = 0 on [-h, 0)
//! ```
//!
//! with a one-dimensional Wiener process, so `σ` is a column.

use std::sync::Arc;

use serde::Deserialize;

use crate::analysis::{self, GrammianVariant};
use crate::building::BuildingParams;
use crate::error::{Error, Result};
use crate::numerics::{
    ensure_finite, ensure_spd, matrix_quadrature, rk4_step, Flow, MatrixFn, MatrixPath, Mat,
    TimeGrid, Vector,
};

/// Deterministic matrix-valued coefficient.
#[derive(Clone)]
pub enum TimeVaryingMatrix {
    Constant(Mat),
    /// Strictly increasing times; linear interpolation, clamped at the ends.
    Sampled { times: Vec<f64>, values: Vec<Mat> },
    /// Closed-form drift of the building temperature model.
    BuildingDrift(BuildingParams),
    /// Any other closed form, e.g. the drift of a reduced problem.
    Function(Arc<dyn MatrixFn>),
}

impl std::fmt::Debug for TimeVaryingMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Self::Sampled { times, .. } => f
                .debug_struct("Sampled")
                .field("nodes", &times.len())
                .finish(),
            Self::BuildingDrift(p) => f.debug_tuple("BuildingDrift").field(p).finish(),
            Self::Function(g) => f.debug_tuple("Function").field(&g.shape()).finish(),
        }
    }
}

impl TimeVaryingMatrix {
    pub fn constant(m: Mat) -> Self {
        Self::Constant(m)
    }

    pub fn sampled(times: Vec<f64>, values: Vec<Mat>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Parameter(format!(
                "sampled matrix needs one value per time ({} times, {} values)",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parameter("sample times must be strictly increasing".into()));
        }
        let shape = values[0].shape();
        for v in &values {
            if v.shape() != shape {
                return Err(Error::Shape {
                    what: "sampled matrix".into(),
                    expected: shape,
                    got: v.shape(),
                });
            }
            ensure_finite(v, "sampled matrix")?;
        }
        Ok(Self::Sampled { times, values })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant(_))
    }

    /// Fails unless sampled data covers `[t0, t1]`.
    pub fn check_coverage(&self, t0: f64, t1: f64) -> std::result::Result<(), String> {
        if let Self::Sampled { times, .. } = self {
            let tol = 1e-12 * t1.abs().max(1.0);
            let first = times[0];
            let last = times[times.len() - 1];
            if first > t0 + tol || last < t1 - tol {
                return Err(format!(
                    "samples cover [{first}, {last}] but [{t0}, {t1}] is required"
                ));
            }
        }
        Ok(())
    }
}

impl MatrixFn for TimeVaryingMatrix {
    fn eval(&self, t: f64) -> Mat {
        match self {
            Self::Constant(m) => m.clone(),
            Self::Sampled { times, values } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return values[0].clone();
                }
                if t >= times[last] {
                    return values[last].clone();
                }
                let k = times.partition_point(|&s| s <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                if w == 0.0 {
                    values[k].clone()
                } else {
                    &values[k] * (1.0 - w) + &values[k + 1] * w
                }
            }
            Self::BuildingDrift(p) => Mat::from_column_slice(2, 1, p.drift(t).as_slice()),
            Self::Function(f) => f.eval(t),
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Self::Constant(m) => m.shape(),
            Self::Sampled { values, .. } => values[0].shape(),
            Self::BuildingDrift(_) => (2, 1),
            Self::Function(f) => f.shape(),
        }
    }
}

/// Discretization used for fundamental matrices and quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    /// RK4 steps for the stored flow of `A` on `[0, T + h]`.
    pub flow_steps: usize,
    /// Simpson steps (even) per window integral.
    pub quad_steps: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            flow_steps: 4000,
            quad_steps: 256,
        }
    }
}

/// The quintuple `(A, B, r, σ, h)` with horizon `T` and initial state `X₀`.
#[derive(Clone)]
pub struct DelayedSystem {
    a: Arc<TimeVaryingMatrix>,
    b: Arc<TimeVaryingMatrix>,
    r: Arc<TimeVaryingMatrix>,
    sigma: Arc<TimeVaryingMatrix>,
    delay: f64,
    horizon: f64,
    x0: Vector,
    resolution: Resolution,
    flow: Arc<Flow>,
}

impl std::fmt::Debug for DelayedSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DelayedSystem")
            .field("n", &self.dim_state())
            .field("m", &self.dim_control())
            .field("delay", &self.delay)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl DelayedSystem {
    pub fn new(
        a: TimeVaryingMatrix,
        b: TimeVaryingMatrix,
        r: TimeVaryingMatrix,
        sigma: TimeVaryingMatrix,
        delay: f64,
        horizon: f64,
        x0: Vector,
    ) -> Result<Self> {
        Self::with_resolution(a, b, r, sigma, delay, horizon, x0, Resolution::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_resolution(
        a: TimeVaryingMatrix,
        b: TimeVaryingMatrix,
        r: TimeVaryingMatrix,
        sigma: TimeVaryingMatrix,
        delay: f64,
        horizon: f64,
        x0: Vector,
        resolution: Resolution,
    ) -> Result<Self> {
        let field_err = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(field_err("horizon", format!("must be positive, got {horizon}")));
        }
        if !delay.is_finite() || delay <= 0.0 {
            return Err(field_err("delay", format!("must be positive, got {delay}")));
        }
        if delay >= horizon {
            return Err(field_err(
                "delay",
                format!("must be smaller than the horizon ({delay} >= {horizon})"),
            ));
        }
        if resolution.quad_steps == 0 || resolution.quad_steps % 2 != 0 {
            return Err(Error::Parameter("quad_steps must be positive and even".into()));
        }
        let n = x0.len();
        if n == 0 {
            return Err(field_err("initial_state", "state dimension must be positive".into()));
        }
        ensure_finite(&Mat::from_column_slice(n, 1, x0.as_slice()), "initial state")?;
        let (an, ac) = a.shape();
        if (an, ac) != (n, n) {
            return Err(field_err("A", format!("expected {n}x{n}, got {an}x{ac}")));
        }
        let (bn, m) = b.shape();
        if bn != n || m == 0 {
            return Err(field_err("B", format!("expected {n}xm, got {bn}x{m}")));
        }
        if r.shape() != (n, 1) {
            let (rr, rc) = r.shape();
            return Err(field_err("drift", format!("expected {n}x1, got {rr}x{rc}")));
        }
        if sigma.shape() != (n, 1) {
            let (sr, sc) = sigma.shape();
            return Err(field_err("sigma", format!("expected {n}x1, got {sr}x{sc}")));
        }
        let end = horizon + delay;
        for (name, coeff) in [("A", &a), ("B", &b), ("drift", &r), ("sigma", &sigma)] {
            coeff
                .check_coverage(0.0, end)
                .map_err(|msg| field_err(name, msg))?;
        }
        let a = Arc::new(a);
        let grid = TimeGrid::new(0.0, end, resolution.flow_steps)?;
        let flow = Arc::new(Flow::new(a.clone(), grid)?);
        Ok(Self {
            a,
            b: Arc::new(b),
            r: Arc::new(r),
            sigma: Arc::new(sigma),
            delay,
            horizon,
            x0,
            resolution,
            flow,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.x0.len()
    }

    pub fn dim_control(&self) -> usize {
        self.b.shape().1
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> &Vector {
        &self.x0
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn a_fn(&self) -> &TimeVaryingMatrix {
        &self.a
    }

    pub fn b_fn(&self) -> &TimeVaryingMatrix {
        &self.b
    }

    pub fn drift_fn(&self) -> &TimeVaryingMatrix {
        &self.r
    }

    pub fn sigma_fn(&self) -> &TimeVaryingMatrix {
        &self.sigma
    }

    pub fn a(&self, t: f64) -> Mat {
        self.a.eval(t)
    }

    pub fn b(&self, t: f64) -> Mat {
        self.b.eval(t)
    }

    pub fn drift(&self, t: f64) -> Vector {
        self.r.eval(t).column(0).into_owned()
    }

    pub fn sigma(&self, t: f64) -> Vector {
        self.sigma.eval(t).column(0).into_owned()
    }

    /// σ(t)σ(t)ᵀ.
    pub fn diffusion(&self, t: f64) -> Mat {
        let s = self.sigma(t);
        &s * s.transpose()
    }

    /// Φ_A(t, s) for `t, s ∈ [0, T + h]`.
    pub fn transition(&self, t: f64, s: f64) -> Mat {
        self.flow.transition(t, s)
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    /// `A` and `B` constant (so `B̄` is constant too).
    pub fn is_time_invariant(&self) -> bool {
        self.a.is_constant() && self.b.is_constant()
    }

    /// B̄(t) = Φ_A(t, t + h) B(t + h), defined on `[0, T]`.
    pub fn artstein_input_matrix(&self, t: f64) -> Result<Mat> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Range {
                what: "Artstein input matrix".into(),
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        let t = t.clamp(0.0, self.horizon);
        Ok(self.bbar_unchecked(t))
    }

    pub(crate) fn bbar_unchecked(&self, t: f64) -> Mat {
        self.transition(t, t + self.delay) * self.b(t + self.delay)
    }

    /// `B̄` as a coefficient function (clamped to `[0, T]`).
    pub fn bbar_fn(&self) -> BbarFn<'_> {
        BbarFn(self)
    }

    /// Grid on `[0, T − h]`, where Artstein-state feedback acts.
    pub fn control_grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon - self.delay, steps)
    }

    /// Same model with a different drift and initial state.
    pub fn with_drift_and_initial_state(&self, r: TimeVaryingMatrix, x0: Vector) -> Result<Self> {
        if r.shape() != (self.dim_state(), 1) || x0.len() != self.dim_state() {
            return Err(Error::Shape {
                what: "replacement drift/initial state".into(),
                expected: (self.dim_state(), 1),
                got: r.shape(),
            });
        }
        Ok(Self {
            r: Arc::new(r),
            x0,
            ..self.clone()
        })
    }

    /// Same model with different noise.
    pub fn with_sigma(&self, sigma: TimeVaryingMatrix) -> Result<Self> {
        if sigma.shape() != (self.dim_state(), 1) {
            return Err(Error::Shape {
                what: "replacement sigma".into(),
                expected: (self.dim_state(), 1),
                got: sigma.shape(),
            });
        }
        Ok(Self {
            sigma: Arc::new(sigma),
            ..self.clone()
        })
    }
}

pub struct BbarFn<'a>(&'a DelayedSystem);

impl MatrixFn for BbarFn<'_> {
    fn eval(&self, t: f64) -> Mat {
        self.0.bbar_unchecked(t.clamp(0.0, self.0.horizon))
    }

    fn shape(&self) -> (usize, usize) {
        (self.0.dim_state(), self.0.dim_control())
    }
}

/// System plus target mean and covariance at the horizon.
#[derive(Debug, Clone)]
pub struct SteeringProblem {
    pub system: DelayedSystem,
    pub target_mean: Vector,
    pub target_covariance: Mat,
}

impl SteeringProblem {
    pub fn new(system: DelayedSystem, target_mean: Vector, target_covariance: Mat) -> Result<Self> {
        let n = system.dim_state();
        if target_mean.len() != n {
            return Err(Error::Config {
                field: "target_mean".into(),
                message: format!("expected {n} entries, got {}", target_mean.len()),
            });
        }
        if target_covariance.shape() != (n, n) {
            return Err(Error::Config {
                field: "target_covariance".into(),
                message: format!("expected {n}x{n}, got {:?}", target_covariance.shape()),
            });
        }
        ensure_spd(&target_covariance, "target covariance").map_err(|e| Error::Config {
            field: "target_covariance".into(),
            message: e.to_string(),
        })?;
        Ok(Self {
            system,
            target_mean,
            target_covariance,
        })
    }
}

/// Problem shifted by the straight-line reference `X_r(t)` so that the mean
/// starts and ends at zero.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    /// Drift `r̄`, zero initial state.
    pub system: DelayedSystem,
    pub original: DelayedSystem,
    pub target_mean: Vector,
    pub target_covariance: Mat,
}

impl ReducedProblem {
    /// X_r(t) = X_T t/T + X₀ (T − t)/T.
    pub fn reference(&self, t: f64) -> Vector {
        reference_path(
            self.original.initial_state(),
            &self.target_mean,
            self.original.horizon(),
            t,
        )
    }
}

fn reference_path(x0: &Vector, xt: &Vector, horizon: f64, t: f64) -> Vector {
    if t == horizon {
        return xt.clone();
    }
    if t == 0.0 {
        return x0.clone();
    }
    xt * (t / horizon) + x0 * ((horizon - t) / horizon)
}

/// Subtracts `X_r`; the reduced drift is r̄ = r − Ẋ_r + A X_r.
pub fn reduce_problem(p: &SteeringProblem) -> Result<ReducedProblem> {
    let sys = &p.system;
    let n = sys.dim_state();
    let x0 = sys.initial_state().clone();
    let xt = p.target_mean.clone();
    let horizon = sys.horizon();
    let slope = (&xt - &x0) / horizon;
    let a = sys.a.clone();
    let r = sys.r.clone();
    let drift = move |t: f64| {
        let xr = reference_path(&x0, &xt, horizon, t);
        let v = r.eval(t).column(0) - &slope + a.eval(t) * xr;
        Mat::from_column_slice(n, 1, v.as_slice())
    };
    let reduced_drift = TimeVaryingMatrix::Function(Arc::new(crate::numerics::FnMatrix::new(
        n, 1, drift,
    )));
    let system = sys.with_drift_and_initial_state(reduced_drift, Vector::zeros(n))?;
    Ok(ReducedProblem {
        system,
        original: sys.clone(),
        target_mean: p.target_mean.clone(),
        target_covariance: p.target_covariance.clone(),
    })
}

/// Deterministic open-loop control on the feedback grid plus the Artstein
/// mean it produces (in original coordinates). Feedback laws act on
/// `Y − reference`, so the random part of the control has zero mean.
#[derive(Debug, Clone)]
pub struct Feedforward {
    control: MatrixPath,
    reference: MatrixPath,
}

impl Feedforward {
    /// Samples `u` on `grid` and integrates the Artstein mean
    /// ẏ = A y + B̄ u + r, y(0) = X₀ under it.
    pub fn from_control<F>(sys: &DelayedSystem, grid: TimeGrid, u: F) -> Result<Self>
    where
        F: Fn(f64) -> Vector,
    {
        let m = sys.dim_control();
        let n = sys.dim_state();
        let samples: Vec<Mat> = grid
            .times()
            .map(|t| {
                let v = u(t);
                Mat::from_column_slice(m, 1, v.as_slice())
            })
            .collect();
        for s in &samples {
            if s.nrows() != m {
                return Err(Error::Shape {
                    what: "feedforward control".into(),
                    expected: (m, 1),
                    got: s.shape(),
                });
            }
            ensure_finite(s, "feedforward control")?;
        }
        let control = MatrixPath::new(grid, samples)?;
        let bbar = sys.bbar_fn();
        let rhs = |t: f64, y: &Mat| {
            sys.a(t) * y + bbar.eval(t) * control.eval(t) + sys.r.eval(t)
        };
        let dt = grid.dt();
        let mut refs = Vec::with_capacity(grid.len());
        refs.push(Mat::from_column_slice(n, 1, sys.initial_state().as_slice()));
        for k in 0..grid.steps() {
            let next = rk4_step(&rhs, grid.time(k), &refs[k], dt);
            refs.push(next);
        }
        let reference = MatrixPath::new(grid, refs)?;
        Ok(Self { control, reference })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.control.grid()
    }

    pub fn control_path(&self) -> &MatrixPath {
        &self.control
    }

    pub fn reference_path(&self) -> &MatrixPath {
        &self.reference
    }

    pub fn control_at(&self, k: usize) -> Vector {
        self.control.at(k).column(0).into_owned()
    }

    pub fn reference_at(&self, k: usize) -> Vector {
        self.reference.at(k).column(0).into_owned()
    }

    /// E[X(T)] implied by the Artstein mean at `T − h`:
    /// Φ(T, T−h) y(T−h) + ∫_{T−h}^T Φ(T, s) r(s) ds.
    pub fn predicted_terminal_mean(&self, sys: &DelayedSystem) -> Result<Vector> {
        let horizon = sys.horizon();
        let start = horizon - sys.delay();
        let y = self.reference.eval(start);
        let drift = matrix_quadrature(
            |s| sys.transition(horizon, s) * sys.r.eval(s),
            start,
            horizon,
            sys.resolution().quad_steps,
        )?;
        Ok((sys.transition(horizon, start) * y + drift).column(0).into_owned())
    }
}

/// Minimum-energy feedforward for the reduced Artstein mean dynamics.
///
/// U(t) = −B̄(t)ᵀ Φ(T−h, t)ᵀ Ḡ⁻¹ ∫₀ᵀ Φ(T−h, s) r̄(s) ds, where Ḡ is the
/// Artstein Grammian over `[0, T − h]`. The integral runs to `T` so the drift
/// acting after `T − h` is pre-compensated and E[X(T)] = X_T.
pub fn drift_feedforward(rp: &ReducedProblem, grid: TimeGrid) -> Result<Feedforward> {
    let sys = &rp.system;
    let horizon = sys.horizon();
    let end = horizon - sys.delay();
    check_control_grid(sys, &grid)?;
    let g = analysis::grammian(sys, 0.0, GrammianVariant::Artstein)?;
    let g_inv = analysis::checked_grammian_inverse(&g)?;
    let steps = even_steps_for(sys.resolution().quad_steps, horizon / sys.delay());
    let integral = matrix_quadrature(
        |s| sys.transition(end, s) * sys.r.eval(s),
        0.0,
        horizon,
        steps,
    )?;
    let coeff = g_inv * integral;
    let drift_is_zero = coeff.iter().all(|x| *x == 0.0);
    Feedforward::from_control(&rp.original, grid, |t| {
        if drift_is_zero {
            return Vector::zeros(sys.dim_control());
        }
        let v = -(sys.bbar_unchecked(t).transpose() * sys.transition(end, t).transpose() * &coeff);
        v.column(0).into_owned()
    })
}

pub(crate) fn even_steps_for(base: usize, scale: f64) -> usize {
    let s = (base as f64 * scale.max(1.0)).ceil() as usize;
    s + s % 2
}

pub(crate) fn check_control_grid(sys: &DelayedSystem, grid: &TimeGrid) -> Result<()> {
    let end = sys.horizon() - sys.delay();
    let tol = 1e-9 * end.max(1.0);
    if grid.t_start().abs() > tol || (grid.t_end() - end).abs() > tol {
        return Err(Error::Grid(format!(
            "feedback grid must span [0, {end}], got [{}, {}]",
            grid.t_start(),
            grid.t_end()
        )));
    }
    Ok(())
}

/// Control samples `U(s)` on a uniform grid; `U = 0` before time zero.
#[derive(Debug, Clone)]
pub struct ControlHistory {
    pub grid: TimeGrid,
    pub values: Vec<Vector>,
}

/// Y(t) = X(t) + ∫_{t−h}^t Φ_A(t, s+h) B(s+h) U(s) ds by the trapezoid rule
/// on the history grid.
pub fn artstein_transform_path(
    x: &Vector,
    history: &ControlHistory,
    sys: &DelayedSystem,
    t: f64,
) -> Result<Vector> {
    let h = sys.delay();
    let from = (t - h).max(0.0);
    let grid = &history.grid;
    if history.values.len() != grid.len() {
        return Err(Error::Grid("control history length does not match its grid".into()));
    }
    let (Some(k0), Some(k1)) = (grid.index_of(from), grid.index_of(t)) else {
        return Err(Error::History {
            needed_from: from,
            needed_to: t,
        });
    };
    let mut y = x.clone();
    if k1 == k0 {
        return Ok(y);
    }
    let dt = grid.dt();
    for k in k0..=k1 {
        let s = grid.time(k);
        let w = if k == k0 || k == k1 { 0.5 } else { 1.0 };
        let u = &history.values[k];
        if u.iter().all(|v| *v == 0.0) {
            continue;
        }
        y += sys.transition(t, s + h) * sys.b(s + h) * u * (w * dt);
    }
    Ok(y)
}

// --- configuration -------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDocument {
    dim_state: usize,
    dim_control: usize,
    horizon: f64,
    delay: f64,
    #[serde(rename = "A")]
    a: MatrixSpec,
    #[serde(rename = "B")]
    b: MatrixSpec,
    sigma: MatrixSpec,
    #[serde(default)]
    drift: Option<MatrixSpec>,
    initial_state: Vec<f64>,
    #[serde(default)]
    target_mean: Option<Vec<f64>>,
    #[serde(default)]
    target_covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum MatrixSpec {
    Constant { value: Vec<Vec<f64>> },
    Sampled { times: Vec<f64>, values: Vec<Vec<Vec<f64>>> },
    Builtin { name: String },
}

/// Result of [`load_system`].
#[derive(Debug, Clone)]
pub enum LoadedModel {
    System(DelayedSystem),
    Problem(SteeringProblem),
}

impl LoadedModel {
    pub fn system(&self) -> &DelayedSystem {
        match self {
            Self::System(s) => s,
            Self::Problem(p) => &p.system,
        }
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<Mat> {
    let cfg = |message: String| Error::Config {
        field: field.into(),
        message,
    };
    if rows.is_empty() || rows[0].is_empty() {
        return Err(cfg("matrix must be non-empty".into()));
    }
    let cols = rows[0].len();
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(cfg(format!("row {i} has a different length than row 0")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(cfg("entries must be finite".into()));
    }
    Ok(Mat::from_row_slice(rows.len(), cols, &flat))
}

fn resolve_spec(
    spec: MatrixSpec,
    field: &str,
    expected: (usize, usize),
    building: &BuildingParams,
) -> Result<TimeVaryingMatrix> {
    let cfg = |message: String| Error::Config {
        field: field.into(),
        message,
    };
    let tv = match spec {
        MatrixSpec::Constant { value } => {
            TimeVaryingMatrix::Constant(rows_to_matrix(&value, &format!("{field}.value"))?)
        }
        MatrixSpec::Sampled { times, values } => {
            if times.len() != values.len() {
                return Err(cfg(format!(
                    "{} times but {} values",
                    times.len(),
                    values.len()
                )));
            }
            let mats = values
                .iter()
                .enumerate()
                .map(|(i, v)| rows_to_matrix(v, &format!("{field}.values[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            TimeVaryingMatrix::sampled(times, mats).map_err(|e| cfg(e.to_string()))?
        }
        MatrixSpec::Builtin { name } => {
            if name != "building" {
                return Err(cfg(format!("unknown builtin `{name}`")));
            }
            match field {
                "A" => TimeVaryingMatrix::Constant(building.a()),
                "B" => TimeVaryingMatrix::Constant(building.b()),
                "sigma" => TimeVaryingMatrix::Constant(building.sigma()),
                "drift" => TimeVaryingMatrix::BuildingDrift(*building),
                _ => return Err(cfg("no builtin available for this field".into())),
            }
        }
    };
    if tv.shape() != expected {
        return Err(cfg(format!(
            "expected {}x{}, got {}x{}",
            expected.0,
            expected.1,
            tv.shape().0,
            tv.shape().1
        )));
    }
    Ok(tv)
}

/// Parses and validates a JSON system document.
pub fn load_system(text: &str) -> Result<LoadedModel> {
    load_system_with(text, Resolution::default())
}

pub fn load_system_with(text: &str, resolution: Resolution) -> Result<LoadedModel> {
    let doc: SystemDocument = serde_json::from_str(text).map_err(|e| Error::Config {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let n = doc.dim_state;
    let m = doc.dim_control;
    if n == 0 {
        return Err(Error::Config {
            field: "dim_state".into(),
            message: "must be positive".into(),
        });
    }
    if m == 0 {
        return Err(Error::Config {
            field: "dim_control".into(),
            message: "must be positive".into(),
        });
    }
    if doc.initial_state.len() != n {
        return Err(Error::Config {
            field: "initial_state".into(),
            message: format!("expected {n} entries, got {}", doc.initial_state.len()),
        });
    }
    for (field, v) in [("horizon", doc.horizon), ("delay", doc.delay)] {
        if !v.is_finite() {
            return Err(Error::Config {
                field: field.into(),
                message: "must be finite".into(),
            });
        }
    }
    let building = BuildingParams::default();
    let a = resolve_spec(doc.a, "A", (n, n), &building)?;
    let b = resolve_spec(doc.b, "B", (n, m), &building)?;
    let sigma = resolve_spec(doc.sigma, "sigma", (n, 1), &building)?;
    let drift = match doc.drift {
        Some(spec) => resolve_spec(spec, "drift", (n, 1), &building)?,
        None => TimeVaryingMatrix::Constant(Mat::zeros(n, 1)),
    };
    let x0 = Vector::from_vec(doc.initial_state);
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config {
            field: "initial_state".into(),
            message: "entries must be finite".into(),
        });
    }
    let system =
        DelayedSystem::with_resolution(a, b, drift, sigma, doc.delay, doc.horizon, x0, resolution)?;
    match (doc.target_mean, doc.target_covariance) {
        (None, None) => Ok(LoadedModel::System(system)),
        (Some(mean), Some(cov)) => {
            let cov = rows_to_matrix(&cov, "target_covariance")?;
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config {
                    field: "target_mean".into(),
                    message: "entries must be finite".into(),
                });
            }
            Ok(LoadedModel::Problem(SteeringProblem::new(
                system,
                Vector::from_vec(mean),
                cov,
            )?))
        }
        (Some(_), None) => Err(Error::Config {
            field: "target_covariance".into(),
            message: "required when target_mean is given".into(),
        }),
        (None, Some(_)) => Err(Error::Config {
            field: "target_mean".into(),
            message: "required when target_covariance is given".into(),
        }),
    }
}
