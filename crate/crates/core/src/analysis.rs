//! Structural covariance quantities of the delayed system: the threshold
//! covariance Σ_min, Grammians and controllability reports, the covariance
//! map between the state and its Artstein transform, and the V_min profile.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{even_steps_for, DelayedSystem};
use crate::numerics::{
    ensure_psd, integrate_samples, matrix_quadrature, min_eigenvalue, symmetrize, Mat, MatrixFn,
    TimeGrid,
};

/// Condition number above which a Grammian counts as singular.
pub const MAX_CONDITION: f64 = 1e10;
/// Relative singular-value floor for Grammian invertibility.
pub const MIN_RELATIVE_SV: f64 = 1e-12;
/// Relative margin kept away from the degenerate end of the τ range.
pub const TAU_END_MARGIN: f64 = 1e-3;

fn check_window(sys: &DelayedSystem, t: f64, what: &str) -> Result<f64> {
    let (lo, hi) = (sys.delay(), sys.horizon());
    let tol = 1e-12 * hi.max(1.0);
    if t < lo - tol || t > hi + tol {
        return Err(Error::Range {
            what: what.into(),
            t,
            lo,
            hi,
        });
    }
    Ok(t.clamp(lo, hi))
}

/// Σ_min(t) = ∫_{t−h}^t Φ_A(t,s) σ(s)σ(s)ᵀ Φ_A(t,s)ᵀ ds, for `h ≤ t ≤ T`.
pub fn sigma_min(sys: &DelayedSystem, t: f64) -> Result<Mat> {
    let t = check_window(sys, t, "threshold covariance")?;
    sigma_min_unchecked(sys, t)
}

pub(crate) fn sigma_min_unchecked(sys: &DelayedSystem, t: f64) -> Result<Mat> {
    let flow = sys.flow();
    let outer = flow.from_origin(t);
    let inner = matrix_quadrature(
        |s| {
            let v = flow.to_origin(s) * sys.sigma(s);
            &v * v.transpose()
        },
        t - sys.delay(),
        t,
        sys.resolution().quad_steps,
    )?;
    Ok(symmetrize(&(&outer * inner * outer.transpose())))
}

/// Σ_min on every node of `grid` (all nodes must lie in `[h, T]`).
pub fn sigma_min_profile(sys: &DelayedSystem, grid: &TimeGrid) -> Result<Vec<Mat>> {
    check_window(sys, grid.t_start(), "threshold covariance")?;
    check_window(sys, grid.t_end(), "threshold covariance")?;
    let times: Vec<f64> = grid.times().collect();
    times
        .par_iter()
        .map(|&t| sigma_min_unchecked(sys, t.clamp(sys.delay(), sys.horizon())))
        .collect()
}

/// Σ_X(t) = Φ_A(t, t−h) Σ_Y(t−h) Φ_A(t, t−h)ᵀ + Σ_min(t).
pub fn covariance_from_artstein(sys: &DelayedSystem, sigma_y: &Mat, t: f64) -> Result<Mat> {
    ensure_psd(sigma_y, "Artstein covariance")?;
    let t = check_window(sys, t, "covariance map")?;
    let phi = sys.transition(t, t - sys.delay());
    Ok(symmetrize(&(&phi * sigma_y * phi.transpose() + sigma_min_unchecked(sys, t)?)))
}

/// Artstein covariance at `T − h` that yields `sigma_x_target` at `T`.
pub fn target_for_artstein(sys: &DelayedSystem, sigma_x_target: &Mat) -> Result<Mat> {
    let n = sys.dim_state();
    if sigma_x_target.shape() != (n, n) {
        return Err(Error::Shape {
            what: "target covariance".into(),
            expected: (n, n),
            got: sigma_x_target.shape(),
        });
    }
    let horizon = sys.horizon();
    let excess = symmetrize(&(sigma_x_target - sigma_min_unchecked(sys, horizon)?));
    let lo = min_eigenvalue(&excess);
    let floor = 1e-12 * sigma_x_target.norm().max(f64::MIN_POSITIVE);
    if !(lo > floor) {
        return Err(Error::BelowThreshold { min_eigenvalue: lo });
    }
    let back = sys.transition(horizon - sys.delay(), horizon);
    Ok(symmetrize(&(&back * excess * back.transpose())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammianVariant {
    /// G_τ^{T+h} = ∫_τ^{T+h} Φ_A(T+h,s) B BᵀΦ_A(T+h,s)ᵀ ds, τ ∈ [0, T+h].
    Delayed,
    /// Ḡ_τ = ∫_τ^{T−h} Φ_A(T−h,s) B̄ B̄ᵀ Φ_A(T−h,s)ᵀ ds, τ ∈ [0, T−h].
    Artstein,
}

pub fn grammian(sys: &DelayedSystem, tau: f64, variant: GrammianVariant) -> Result<Mat> {
    match variant {
        GrammianVariant::Delayed => {
            let end = sys.horizon() + sys.delay();
            check_tau(tau, end, "delayed Grammian")?;
            delayed_grammian(sys, tau, end)
        }
        GrammianVariant::Artstein => {
            let end = sys.horizon() - sys.delay();
            check_tau(tau, end, "Artstein Grammian")?;
            artstein_grammian(sys, tau, end)
        }
    }
}

fn check_tau(tau: f64, end: f64, what: &str) -> Result<()> {
    if !(tau >= 0.0 && tau <= end) {
        return Err(Error::Range {
            what: what.into(),
            t: tau,
            lo: 0.0,
            hi: end,
        });
    }
    Ok(())
}

fn quad_steps(sys: &DelayedSystem, len: f64) -> usize {
    even_steps_for(sys.resolution().quad_steps, len / sys.delay())
}

fn delayed_grammian(sys: &DelayedSystem, tau: f64, end: f64) -> Result<Mat> {
    if tau >= end {
        return Ok(Mat::zeros(sys.dim_state(), sys.dim_state()));
    }
    let flow = sys.flow();
    let inner = matrix_quadrature(
        |s| {
            let v = flow.to_origin(s) * sys.b(s);
            &v * v.transpose()
        },
        tau,
        end,
        quad_steps(sys, end - tau),
    )?;
    let outer = flow.from_origin(end);
    Ok(symmetrize(&(&outer * inner * outer.transpose())))
}

/// Artstein Grammian over `[tau, end]`, `end ≤ T`.
pub fn artstein_grammian(sys: &DelayedSystem, tau: f64, end: f64) -> Result<Mat> {
    if tau >= end {
        return Ok(Mat::zeros(sys.dim_state(), sys.dim_state()));
    }
    let flow = sys.flow();
    let inner = matrix_quadrature(
        |s| {
            let v = flow.to_origin(s) * sys.bbar_unchecked(s);
            &v * v.transpose()
        },
        tau,
        end,
        quad_steps(sys, end - tau),
    )?;
    let outer = flow.from_origin(end);
    Ok(symmetrize(&(&outer * inner * outer.transpose())))
}

/// Singular values sorted in decreasing order.
fn singular_values(g: &Mat) -> Vec<f64> {
    let mut sv: Vec<f64> = g.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn is_deficient(sv: &[f64]) -> bool {
    let max = sv.first().copied().unwrap_or(0.0);
    let min = sv.last().copied().unwrap_or(0.0);
    max <= 0.0 || min < MIN_RELATIVE_SV * max || max / min > MAX_CONDITION
}

fn numerical_rank(sv: &[f64]) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s * MAX_CONDITION > max).count()
}

/// Inverse of a Grammian, or a controllability error if it is numerically
/// singular.
pub fn checked_grammian_inverse(g: &Mat) -> Result<Mat> {
    let sv = singular_values(g);
    if is_deficient(&sv) {
        let max = sv.first().copied().unwrap_or(0.0);
        let min = sv.last().copied().unwrap_or(0.0);
        return Err(Error::Controllability(format!(
            "Grammian is singular (rank {} of {}, min singular value {min:e}, max {max:e})",
            numerical_rank(&sv),
            sv.len()
        )));
    }
    g.clone()
        .try_inverse()
        .ok_or_else(|| Error::Controllability("Grammian could not be inverted".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Controllable,
    Deficient { rank: usize, tau: f64 },
}

#[derive(Debug, Clone)]
pub struct ControllabilityReport {
    pub tau_grid: Vec<f64>,
    pub min_singular_values: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    /// Max relative Frobenius mismatch of Ḡ_τ^T = Φ(T,T+h) G_{τ+h}^{T+h} Φ(T,T+h)ᵀ.
    pub delayed_vs_artstein_residual: f64,
    pub verdict: Verdict,
}

impl ControllabilityReport {
    pub fn is_controllable(&self) -> bool {
        self.verdict == Verdict::Controllable
    }

    pub fn verdict_line(&self) -> String {
        match &self.verdict {
            Verdict::Controllable => format!(
                "controllable: Grammian invertible on all {} sampled tau (identity residual {:.3e})",
                self.tau_grid.len(),
                self.delayed_vs_artstein_residual
            ),
            Verdict::Deficient { rank, tau } => format!(
                "deficient: Grammian rank {rank} at tau = {tau} (identity residual {:.3e})",
                self.delayed_vs_artstein_residual
            ),
        }
    }
}

/// Delayed Grammian over a τ grid on `[0, (T+h)(1 − 1e−3)]`, plus the
/// delayed/Artstein Grammian identity check.
pub fn controllability_report(sys: &DelayedSystem, tau_samples: usize) -> Result<ControllabilityReport> {
    if tau_samples < 2 {
        return Err(Error::Parameter("controllability report needs at least 2 tau samples".into()));
    }
    let h = sys.delay();
    let horizon = sys.horizon();
    let end = horizon + h;
    let last = end * (1.0 - TAU_END_MARGIN);
    let taus: Vec<f64> = (0..tau_samples)
        .map(|k| last * k as f64 / (tau_samples - 1) as f64)
        .collect();
    let phi_back = sys.transition(horizon, end);
    let rows = taus
        .par_iter()
        .map(|&tau| -> Result<(f64, f64, Option<f64>, usize, bool)> {
            let g = delayed_grammian(sys, tau, end)?;
            let sv = singular_values(&g);
            let max = sv[0];
            let min = *sv.last().expect("non-empty");
            let cond = if min > 0.0 { max / min } else { f64::INFINITY };
            let deficient = is_deficient(&sv);
            let rank = numerical_rank(&sv);
            let identity = if tau <= horizon * (1.0 - TAU_END_MARGIN) {
                let gbar = artstein_grammian(sys, tau, horizon)?;
                let shifted = delayed_grammian(sys, tau + h, end)?;
                let mapped = &phi_back * shifted * phi_back.transpose();
                let scale = gbar.norm();
                let diff = (gbar - mapped).norm();
                Some(if scale > 0.0 { diff / scale } else { diff })
            } else {
                None
            };
            Ok((min, cond, identity, rank, deficient))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut verdict = Verdict::Controllable;
    for (tau, row) in taus.iter().zip(&rows) {
        if row.4 {
            verdict = Verdict::Deficient {
                rank: row.3,
                tau: *tau,
            };
            break;
        }
    }
    let residual = rows
        .iter()
        .filter_map(|r| r.2)
        .fold(0.0, f64::max);
    Ok(ControllabilityReport {
        min_singular_values: rows.iter().map(|r| r.0).collect(),
        condition_numbers: rows.iter().map(|r| r.1).collect(),
        tau_grid: taus,
        delayed_vs_artstein_residual: residual,
        verdict,
    })
}

/// Weighted threshold profile on `[h, T]`.
#[derive(Debug, Clone)]
pub struct VarianceProfile {
    pub grid: TimeGrid,
    /// V_{min,Q}(t) = trace(Q(t) Σ_min(t)) per node.
    pub v_min_q: Vec<f64>,
    /// V_{min,G}(T) = trace(G Σ_min(T)).
    pub v_min_g_terminal: f64,
    /// ∫_h^T V_{min,Q} dt + V_{min,G}(T).
    pub v_min_total: f64,
}

pub fn v_min_profile(
    sys: &DelayedSystem,
    q: &dyn MatrixFn,
    g: &Mat,
    grid: &TimeGrid,
) -> Result<VarianceProfile> {
    let n = sys.dim_state();
    if q.shape() != (n, n) {
        return Err(Error::Shape {
            what: "state weight Q".into(),
            expected: (n, n),
            got: q.shape(),
        });
    }
    ensure_psd(g, "terminal weight G")?;
    let tol = 1e-9 * sys.horizon().max(1.0);
    if (grid.t_start() - sys.delay()).abs() > tol || (grid.t_end() - sys.horizon()).abs() > tol {
        return Err(Error::Grid(format!(
            "threshold profile grid must span [{}, {}]",
            sys.delay(),
            sys.horizon()
        )));
    }
    for t in grid.times() {
        ensure_psd(&q.eval(t), "state weight Q")?;
    }
    let sigmas = sigma_min_profile(sys, grid)?;
    let v_min_q: Vec<f64> = grid
        .times()
        .zip(&sigmas)
        .map(|(t, s)| (q.eval(t) * s).trace())
        .collect();
    let v_min_g_terminal = (g * sigmas.last().expect("non-empty")).trace();
    let v_min_total = integrate_samples(&v_min_q, grid.dt()) + v_min_g_terminal;
    Ok(VarianceProfile {
        grid: *grid,
        v_min_q,
        v_min_g_terminal,
        v_min_total,
    })
}

/// V_{min,Q}(t) by direct scalar quadrature of σᵀΦᵀ Q Φ σ, independent of Σ_min.
pub fn v_min_q_direct(sys: &DelayedSystem, q: &Mat, t: f64) -> Result<f64> {
    let t = check_window(sys, t, "weighted threshold")?;
    let v = matrix_quadrature(
        |s| {
            let phi = crate::numerics::fundamental_matrix(sys.a_fn(), s, t, 64)
                .expect("validated generator");
            let x = phi * sys.sigma(s);
            Mat::from_element(1, 1, (x.transpose() * q * &x)[(0, 0)])
        },
        t - sys.delay(),
        t,
        sys.resolution().quad_steps,
    )?;
    Ok(v[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeVaryingMatrix;
    use crate::numerics::Vector;

    fn constant(rows: usize, cols: usize, data: &[f64]) -> TimeVaryingMatrix {
        TimeVaryingMatrix::Constant(Mat::from_row_slice(rows, cols, data))
    }

    fn scalar_system(a: f64, sigma: f64, h: f64, horizon: f64) -> DelayedSystem {
        DelayedSystem::new(
            constant(1, 1, &[a]),
            constant(1, 1, &[1.0]),
            constant(1, 1, &[0.0]),
            constant(1, 1, &[sigma]),
            h,
            horizon,
            Vector::zeros(1),
        )
        .unwrap()
    }

    fn double_integrator(b: &[f64]) -> DelayedSystem {
        DelayedSystem::new(
            constant(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            constant(2, 1, b),
            constant(2, 1, &[0.0, 0.0]),
            constant(2, 1, &[0.1, 1.0]),
            0.2,
            1.2,
            Vector::zeros(2),
        )
        .unwrap()
    }

    #[test]
    fn sigma_min_trivial_cases() {
        let sys = scalar_system(-0.5, 0.0, 1.0, 2.0);
        assert_eq!(sigma_min(&sys, 1.5).unwrap()[(0, 0)], 0.0);
        let sys = scalar_system(0.0, 1.5, 0.4, 2.0);
        assert!((sigma_min(&sys, 1.0).unwrap()[(0, 0)] - 2.25 * 0.4).abs() < 1e-12);
        assert!(matches!(sigma_min(&sys, 0.3), Err(Error::Range { .. })));
    }

    #[test]
    fn sigma_min_scalar_closed_form() {
        let sys = scalar_system(-0.5, 1.0, 1.0, 2.0);
        let exact = (1.0 - (-1.0f64).exp()) / 1.0;
        for t in [1.0, 1.5, 2.0] {
            assert!((sigma_min(&sys, t).unwrap()[(0, 0)] - exact).abs() < 1e-6);
        }
        assert!((exact - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn covariance_map_trivial_cases() {
        let sys = scalar_system(-0.5, 1.0, 1.0, 2.0);
        let zero = Mat::zeros(1, 1);
        let s = covariance_from_artstein(&sys, &zero, 1.7).unwrap();
        assert!((s - sigma_min(&sys, 1.7).unwrap()).amax() < 1e-15);

        let quiet = scalar_system(0.0, 0.0, 1.0, 2.0);
        let sy = Mat::from_element(1, 1, 0.8);
        assert!((covariance_from_artstein(&quiet, &sy, 1.2).unwrap() - &sy).amax() < 1e-15);
        assert!(covariance_from_artstein(&quiet, &(-sy), 1.2).is_err());
    }

    #[test]
    fn target_map_inverts_covariance_map() {
        let sys = scalar_system(0.0, 1.0, 0.5, 2.0);
        let floor = sigma_min(&sys, 2.0).unwrap();
        let target = target_for_artstein(&sys, &(&floor + Mat::identity(1, 1))).unwrap();
        assert!((target[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(matches!(
            target_for_artstein(&sys, &floor),
            Err(Error::BelowThreshold { .. })
        ));
    }

    #[test]
    fn grammian_trivial_cases() {
        let sys = DelayedSystem::new(
            constant(2, 2, &[0.0; 4]),
            constant(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            constant(2, 1, &[0.0; 2]),
            constant(2, 1, &[0.0; 2]),
            0.5,
            2.0,
            Vector::zeros(2),
        )
        .unwrap();
        let g = grammian(&sys, 0.0, GrammianVariant::Delayed).unwrap();
        assert!((g - Mat::identity(2, 2) * 2.5).amax() < 1e-12);
        assert!(grammian(&sys, 2.6, GrammianVariant::Delayed).is_err());
        assert!(grammian(&sys, 1.6, GrammianVariant::Artstein).is_err());

        let dead = double_integrator(&[0.0, 0.0]);
        assert_eq!(grammian(&dead, 0.3, GrammianVariant::Delayed).unwrap().amax(), 0.0);
    }

    #[test]
    fn double_integrator_is_controllable() {
        let sys = double_integrator(&[0.0, 1.0]);
        let report = controllability_report(&sys, 12).unwrap();
        assert!(report.is_controllable(), "{}", report.verdict_line());
        assert!(report.delayed_vs_artstein_residual < 1e-6);
        assert!(report.min_singular_values.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn no_actuation_is_deficient_everywhere() {
        let sys = double_integrator(&[0.0, 0.0]);
        let report = controllability_report(&sys, 5).unwrap();
        assert_eq!(report.verdict, Verdict::Deficient { rank: 0, tau: 0.0 });
        assert!(report.condition_numbers.iter().all(|c| c.is_infinite()));
    }

    #[test]
    fn grammian_inverse_rejects_singular() {
        let g = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(checked_grammian_inverse(&g), Err(Error::Controllability(_))));
        let g = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let inv = checked_grammian_inverse(&g).unwrap();
        assert!((inv[(1, 1)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn v_min_profile_scalar() {
        let sys = scalar_system(-0.5, 1.0, 1.0, 2.0);
        let grid = TimeGrid::new(1.0, 2.0, 20).unwrap();
        let q = Mat::identity(1, 1);
        let profile = v_min_profile(&sys, &q, &Mat::zeros(1, 1), &grid).unwrap();
        for v in &profile.v_min_q {
            assert!((v - 0.632121).abs() < 1e-5);
        }
        assert!((profile.v_min_total - 0.632121).abs() < 1e-5);
        assert_eq!(profile.v_min_g_terminal, 0.0);

        let zero = v_min_profile(&sys, &Mat::zeros(1, 1), &Mat::zeros(1, 1), &grid).unwrap();
        assert!(zero.v_min_q.iter().all(|&v| v == 0.0));
        assert_eq!(zero.v_min_total, 0.0);
        assert!(v_min_profile(&sys, &(-q), &Mat::zeros(1, 1), &grid).is_err());
    }
}
