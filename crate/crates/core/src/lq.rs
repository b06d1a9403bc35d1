//! Global-in-time covariance minimization by finite-horizon LQ control of the
//! Artstein state, the cost decomposition against the V_min floor, the
//! ρ-sweep, and the full-actuation / normal pole-placement gain families.

use rayon::prelude::*;

use crate::analysis::{v_min_profile, VarianceProfile};
use crate::error::{Error, Result};
use crate::law::{r_inverse, Diffusion, FeedbackLaw, LawKind};
use crate::model::{check_control_grid, DelayedSystem, TimeVaryingMatrix};
use crate::numerics::{
    ensure_psd, integrate_samples, propagate_lyapunov, solve_riccati, spectral_norm, FnMatrix,
    Mat, MatrixFn, MatrixPath, RiccatiCoefficients, RiccatiDirection, TimeGrid, DEFAULT_BLOW_UP,
};

/// Sample points used to validate time-varying weights.
const WEIGHT_CHECKS: usize = 64;

/// Weights of J_R and their Artstein-coordinate congruences.
#[derive(Debug, Clone)]
pub struct LqWeights {
    sys: DelayedSystem,
    pub q: TimeVaryingMatrix,
    pub g: Mat,
    pub r: TimeVaryingMatrix,
    /// Φ_A(T, T−h)ᵀ G Φ_A(T, T−h).
    pub gbar: Mat,
    pub rho: Option<f64>,
}

impl LqWeights {
    /// Q̄(t) = Φ_A(t+h, t)ᵀ Q(t+h) Φ_A(t+h, t) for `t ∈ [0, T − h]`.
    pub fn qbar(&self, t: f64) -> Mat {
        let h = self.sys.delay();
        let phi = self.sys.transition(t + h, t);
        phi.transpose() * self.q.eval(t + h) * phi
    }

    pub fn qbar_fn(&self) -> FnMatrix<impl Fn(f64) -> Mat + Send + Sync + '_> {
        let n = self.sys.dim_state();
        FnMatrix::new(n, n, move |t| self.qbar(t))
    }
}

pub fn transformed_weights(
    sys: &DelayedSystem,
    q: TimeVaryingMatrix,
    g: Mat,
    r: TimeVaryingMatrix,
) -> Result<LqWeights> {
    let n = sys.dim_state();
    let m = sys.dim_control();
    if q.shape() != (n, n) {
        return Err(Error::Shape {
            what: "state weight Q".into(),
            expected: (n, n),
            got: q.shape(),
        });
    }
    if g.shape() != (n, n) {
        return Err(Error::Shape {
            what: "terminal weight G".into(),
            expected: (n, n),
            got: g.shape(),
        });
    }
    if r.shape() != (m, m) {
        return Err(Error::Shape {
            what: "control weight R".into(),
            expected: (m, m),
            got: r.shape(),
        });
    }
    ensure_psd(&g, "terminal weight G")?;
    let (h, horizon) = (sys.delay(), sys.horizon());
    for k in 0..=WEIGHT_CHECKS {
        let frac = k as f64 / WEIGHT_CHECKS as f64;
        ensure_psd(&q.eval(h + frac * (horizon - h)), "state weight Q")?;
        r_inverse(&r, frac * (horizon - h))?;
    }
    let phi = sys.transition(horizon, horizon - h);
    let gbar = phi.transpose() * &g * phi;
    Ok(LqWeights {
        sys: sys.clone(),
        q,
        g,
        r,
        gbar: crate::numerics::symmetrize(&gbar),
        rho: None,
    })
}

/// Weights with `R = ρ I`.
pub fn weights_with_rho(sys: &DelayedSystem, q: TimeVaryingMatrix, g: Mat, rho: f64) -> Result<LqWeights> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
    }
    let m = sys.dim_control();
    let mut w = transformed_weights(sys, q, g, TimeVaryingMatrix::Constant(Mat::identity(m, m) * rho))?;
    w.rho = Some(rho);
    Ok(w)
}

/// Backward Riccati with P(T−h) = Ḡ; `U = −R⁻¹ B̄ᵀ P Y`.
pub fn synthesize_lq(sys: &DelayedSystem, weights: &LqWeights, grid: TimeGrid) -> Result<FeedbackLaw> {
    check_control_grid(sys, &grid)?;
    let m = sys.dim_control();
    let bbar = sys.bbar_fn();
    let r_inv = FnMatrix::new(m, m, |t| {
        r_inverse(&weights.r, t).expect("control weight validated as SPD")
    });
    let qbar = weights.qbar_fn();
    let coeffs = RiccatiCoefficients {
        a: sys.a_fn(),
        bbar: &bbar,
        r_inv: &r_inv,
        qbar: Some(&qbar),
    };
    let schedule = solve_riccati(
        &coeffs,
        &weights.gbar,
        RiccatiDirection::BackwardFromTerminal,
        grid,
        DEFAULT_BLOW_UP,
    )?;
    FeedbackLaw::from_schedule(sys, LawKind::Lq, schedule, &weights.r)
}

/// Four-term decomposition of J_R for a zero-mean Artstein state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// ∫₀^{T−h} trace(Q̄ Σ_Y) dt
    pub state_running: f64,
    /// trace(Ḡ Σ_Y(T−h))
    pub state_terminal: f64,
    /// ∫₀^{T−h} trace(Kᵀ R K Σ_Y) dt
    pub control_effort: f64,
    /// V_min
    pub v_min_component: f64,
    pub total: f64,
}

/// Deterministic cost of `law` via closed-loop Lyapunov propagation of Σ_Y.
pub fn evaluate_cost(sys: &DelayedSystem, law: &FeedbackLaw, weights: &LqWeights) -> Result<CostBreakdown> {
    let grid = *law.grid();
    check_control_grid(sys, &grid)?;
    let profile = v_min_profile(sys, &weights.q, &weights.g, &grid.shifted(sys.delay()))?;
    evaluate_cost_with_profile(sys, law, weights, &profile)
}

fn evaluate_cost_with_profile(
    sys: &DelayedSystem,
    law: &FeedbackLaw,
    weights: &LqWeights,
    profile: &VarianceProfile,
) -> Result<CostBreakdown> {
    let grid = *law.grid();
    if profile.grid.steps() != grid.steps() {
        return Err(Error::Grid("threshold profile and law grids differ".into()));
    }
    let n = sys.dim_state();
    let sigma_y = propagate_lyapunov(&law.closed_loop(sys), &Diffusion(sys), &Mat::zeros(n, n), grid)?;
    let mut running = Vec::with_capacity(grid.len());
    let mut effort = Vec::with_capacity(grid.len());
    for (k, (t, s)) in sigma_y.iter().enumerate() {
        running.push((weights.qbar(t) * s).trace());
        let kk = law.gain().at(k);
        effort.push((kk.transpose() * weights.r.eval(t) * kk * s).trace());
    }
    let state_running = integrate_samples(&running, grid.dt());
    let control_effort = integrate_samples(&effort, grid.dt());
    let state_terminal = (&weights.gbar * sigma_y.last()).trace();
    let v_min_component = profile.v_min_total;
    Ok(CostBreakdown {
        state_running,
        state_terminal,
        control_effort,
        v_min_component,
        total: state_running + state_terminal + control_effort + v_min_component,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    pub cost: CostBreakdown,
    pub v_min: f64,
    /// (J_ρ − V_min) / V_min
    pub gap: f64,
}

/// LQ synthesis and cost for each `ρ` (strictly decreasing).
pub fn rho_sweep(
    sys: &DelayedSystem,
    q: &TimeVaryingMatrix,
    g: &Mat,
    rhos: &[f64],
    grid: TimeGrid,
) -> Result<Vec<SweepRow>> {
    if rhos.is_empty() {
        return Err(Error::Parameter("rho sweep needs at least one value".into()));
    }
    if rhos.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Parameter("rho values must be strictly decreasing".into()));
    }
    check_control_grid(sys, &grid)?;
    let profile = v_min_profile(sys, q, g, &grid.shifted(sys.delay()))?;
    let v_min = profile.v_min_total;
    rhos.par_iter()
        .map(|&rho| {
            let weights = weights_with_rho(sys, q.clone(), g.clone(), rho)?;
            let law = synthesize_lq(sys, &weights, grid)?;
            let cost = evaluate_cost_with_profile(sys, &law, &weights, &profile)?;
            let gap = if v_min > 0.0 {
                (cost.total - v_min) / v_min
            } else {
                cost.total - v_min
            };
            Ok(SweepRow {
                rho,
                cost,
                v_min,
                gap,
            })
        })
        .collect()
}

/// Moore–Penrose right inverse `Bᵀ(B Bᵀ)⁻¹` of a full-row-rank matrix.
pub fn right_inverse(b: &Mat) -> Option<Mat> {
    let gram = b * b.transpose();
    gram.cholesky().map(|c| b.transpose() * c.inverse())
}

/// Minimum singular value below which `B̄(t)` is not of full row rank.
pub const FULL_RANK_FLOOR: f64 = 1e-10;

/// `U = −K(t)(A(t) + n I) Y` with `B̄ K = I`, so that dY = −n Y dt + σ dW.
pub fn full_actuation_gain(sys: &DelayedSystem, n_gain: f64, grid: TimeGrid) -> Result<FeedbackLaw> {
    if !(n_gain > 0.0) || !n_gain.is_finite() {
        return Err(Error::Parameter(format!("gain must be positive, got {n_gain}")));
    }
    check_control_grid(sys, &grid)?;
    let n = sys.dim_state();
    let bbar = sys.bbar_fn();
    let gains = grid
        .times()
        .map(|t| {
            let b = bbar.eval(t);
            let sv = b.singular_values();
            let min_sv = if b.nrows() > b.ncols() { 0.0 } else { sv.min() };
            if min_sv <= FULL_RANK_FLOOR {
                return Err(Error::FullActuation {
                    time: t,
                    min_singular_value: min_sv,
                });
            }
            let k = right_inverse(&b).ok_or(Error::FullActuation {
                time: t,
                min_singular_value: min_sv,
            })?;
            Ok(k * (sys.a(t) + Mat::identity(n, n) * n_gain))
        })
        .collect::<Result<Vec<_>>>()?;
    FeedbackLaw::from_gains(sys, LawKind::StaticGain, MatrixPath::new(grid, gains)?)
}

/// ‖HHᵀ − HᵀH‖_F ≤ 1e−8 ‖H‖_F² for `H = A − B̄K`, and spectral abscissa ≤ −bound.
pub fn normal_placement_check(a: &Mat, bbar: &Mat, k: &Mat, abscissa_bound: f64) -> bool {
    let h = a - bbar * k;
    if !is_normal(&h) {
        return false;
    }
    spectral_abscissa(&h) <= -abscissa_bound
}

fn commutator_norm(h: &Mat) -> f64 {
    (h * h.transpose() - h.transpose() * h).norm()
}

fn is_normal(h: &Mat) -> bool {
    commutator_norm(h) <= 1e-8 * h.norm_squared()
}

pub fn spectral_abscissa(h: &Mat) -> f64 {
    h.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundRoute {
    /// Law from [`full_actuation_gain`].
    FullActuation,
    /// Constant normal closed loop; checked node by node.
    NormalPlacement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    /// max_t trace(S Σ_Y(t))
    pub lhs_max: f64,
    /// ‖S‖₂ sup_t ‖σ(t)‖² / (2 n)
    pub rhs: f64,
    pub holds: bool,
}

/// Checks E[YᵀSY] ≤ ‖S‖‖σ‖²_∞ / (2n) along the closed loop.
pub fn variance_bound_check(
    sys: &DelayedSystem,
    law: &FeedbackLaw,
    s: &Mat,
    n_gain: f64,
    route: BoundRoute,
) -> Result<BoundCheck> {
    ensure_psd(s, "bound weight S")?;
    if !(n_gain > 0.0) {
        return Err(Error::Parameter(format!("gain must be positive, got {n_gain}")));
    }
    let grid = *law.grid();
    let closed = law.closed_loop(sys);
    if route == BoundRoute::NormalPlacement {
        for t in grid.times() {
            let h = closed.eval(t);
            if !is_normal(&h) {
                return Err(Error::NotNormal {
                    commutator: commutator_norm(&h),
                });
            }
        }
    }
    let n = sys.dim_state();
    let sigma_y = propagate_lyapunov(&closed, &Diffusion(sys), &Mat::zeros(n, n), grid)?;
    let lhs_max = sigma_y
        .values()
        .iter()
        .map(|m| (s * m).trace())
        .fold(0.0, f64::max);
    let sup_sigma = grid
        .times()
        .map(|t| sys.sigma(t).norm())
        .fold(0.0, f64::max);
    let rhs = spectral_norm(s) * sup_sigma * sup_sigma / (2.0 * n_gain);
    Ok(BoundCheck {
        lhs_max,
        rhs,
        holds: lhs_max <= rhs * (1.0 + 1e-9),
    })
}
