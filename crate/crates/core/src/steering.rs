//! Exact covariance steering of the Artstein state.
//!
//! The steering law is `U = −R⁻¹ B̄ᵀ Π Y` where Π solves the forward Riccati
//! equation Π̇ = −AᵀΠ − ΠA + Π B̄ R⁻¹ B̄ᵀ Π from an initial value Π₀. The map
//! from Π₀ to the terminal Artstein covariance has no usable closed form, so
//! Π₀ is found by shooting: a damped Newton iteration on the upper triangle of
//! Π₀ with forward-difference Jacobians and residual-halving line search.
//! Trial values whose Riccati flow escapes count as infinite residual.

use rayon::prelude::*;

use crate::analysis::{self, controllability_report};
use crate::error::{Error, Result};
use crate::law::{r_inverse, Diffusion, FeedbackLaw, LawKind};
use crate::model::{check_control_grid, drift_feedforward, reduce_problem, SteeringProblem};
use crate::model::DelayedSystem;
use crate::numerics::{
    ensure_psd, ensure_spd, propagate_lyapunov, symmetrize, CovarianceTrajectory, Mat, MatrixFn,
    MatrixPath, TimeGrid, Vector, DEFAULT_BLOW_UP,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingOptions {
    /// Relative Frobenius tolerance on the terminal covariance.
    pub tol: f64,
    pub max_iter: usize,
    pub blow_up: f64,
    /// Relative forward-difference perturbation.
    pub fd_step: f64,
    /// τ samples for the controllability precondition.
    pub tau_samples: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            blow_up: DEFAULT_BLOW_UP,
            fd_step: 1e-6,
            tau_samples: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShootingResult {
    pub law: FeedbackLaw,
    pub pi0: Mat,
    /// ‖Σ_Y(T−h) − target‖_F / ‖target‖_F.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Σ_Y on `[0, T − h]`.
    pub predicted_sigma_y: CovarianceTrajectory,
    /// Σ_X on `[h, T]`.
    pub predicted_sigma_x: CovarianceTrajectory,
    /// E[X(T)] implied by the feedforward, when one is attached.
    pub predicted_terminal_mean: Option<Vector>,
}

/// Σ_Y under zero control from Σ_Y(0) = 0.
pub fn natural_covariance(sys: &DelayedSystem, grid: TimeGrid) -> Result<CovarianceTrajectory> {
    let n = sys.dim_state();
    propagate_lyapunov(sys.a_fn(), &Diffusion(sys), &Mat::zeros(n, n), grid)
}

/// Coefficients sampled at every node and half-step of the feedback grid.
struct SteeringCoefficients {
    grid: TimeGrid,
    a: Vec<Mat>,
    /// B̄ R⁻¹ B̄ᵀ
    gain_input: Vec<Mat>,
    diffusion: Vec<Mat>,
}

impl SteeringCoefficients {
    fn new(sys: &DelayedSystem, r: &dyn MatrixFn, grid: TimeGrid) -> Result<Self> {
        let fine = grid.refined(2);
        let bbar = sys.bbar_fn();
        let mut a = Vec::with_capacity(fine.len());
        let mut gain_input = Vec::with_capacity(fine.len());
        let mut diffusion = Vec::with_capacity(fine.len());
        for t in fine.times() {
            let b = bbar.eval(t);
            a.push(sys.a(t));
            gain_input.push(&b * r_inverse(r, t)? * b.transpose());
            diffusion.push(sys.diffusion(t));
        }
        Ok(Self {
            grid,
            a,
            gain_input,
            diffusion,
        })
    }

    fn riccati(&self, i: usize, p: &Mat) -> Mat {
        let pa = p * &self.a[i];
        p * &self.gain_input[i] * p - &pa - pa.transpose()
    }

    fn lyapunov(&self, i: usize, p: &Mat, s: &Mat) -> Mat {
        let a_cl = &self.a[i] - &self.gain_input[i] * p;
        let a_s = a_cl * s;
        &a_s + a_s.transpose() + &self.diffusion[i]
    }

    /// Joint RK4 of (Π, Σ_Y) from (Π₀, 0). `None` when Π escapes.
    fn propagate(&self, pi0: &Mat, blow_up: f64, keep: bool) -> Option<(Vec<Mat>, Vec<Mat>)> {
        let n = pi0.nrows();
        let dt = self.grid.dt();
        let half = 0.5 * dt;
        let mut p = symmetrize(pi0);
        let mut s = Mat::zeros(n, n);
        let mut ps = Vec::new();
        let mut ss = Vec::new();
        if keep {
            ps.push(p.clone());
            ss.push(s.clone());
        }
        for k in 0..self.grid.steps() {
            let (i0, i1, i2) = (2 * k, 2 * k + 1, 2 * k + 2);
            let kp1 = self.riccati(i0, &p);
            let ks1 = self.lyapunov(i0, &p, &s);
            let p2 = &p + &kp1 * half;
            let s2 = &s + &ks1 * half;
            let kp2 = self.riccati(i1, &p2);
            let ks2 = self.lyapunov(i1, &p2, &s2);
            let p3 = &p + &kp2 * half;
            let s3 = &s + &ks2 * half;
            let kp3 = self.riccati(i1, &p3);
            let ks3 = self.lyapunov(i1, &p3, &s3);
            let p4 = &p + &kp3 * dt;
            let s4 = &s + &ks3 * dt;
            let kp4 = self.riccati(i2, &p4);
            let ks4 = self.lyapunov(i2, &p4, &s4);
            p = symmetrize(&(&p + (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (dt / 6.0)));
            s = symmetrize(&(&s + (ks1 + ks2 * 2.0 + ks3 * 2.0 + ks4) * (dt / 6.0)));
            if !p.iter().all(|x| x.is_finite() && x.abs() <= blow_up)
                || !s.iter().all(|x| x.is_finite())
            {
                return None;
            }
            if keep {
                ps.push(p.clone());
                ss.push(s.clone());
            }
        }
        if !keep {
            ps.push(p);
            ss.push(s);
        }
        Some((ps, ss))
    }
}

fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn unpack(x: &[f64], n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = x[k];
            m[(j, i)] = x[k];
            k += 1;
        }
    }
    m
}

/// Upper triangle with off-diagonals scaled by √2, so the Euclidean norm
/// equals the Frobenius norm of the full matrix.
fn pack_weighted(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(triangle_len(n));
    for i in 0..n {
        for j in i..n {
            v.push(if i == j { m[(i, j)] } else { m[(i, j)] * std::f64::consts::SQRT_2 });
        }
    }
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Shooter<'a> {
    coeffs: &'a SteeringCoefficients,
    target: &'a Mat,
    scale: f64,
    n: usize,
    blow_up: f64,
}

impl Shooter<'_> {
    fn residual(&self, x: &[f64]) -> Option<Vec<f64>> {
        let pi0 = unpack(x, self.n);
        let (_, ss) = self.coeffs.propagate(&pi0, self.blow_up, false)?;
        let diff = (ss.last().expect("terminal") - self.target) / self.scale;
        Some(pack_weighted(&diff))
    }
}

/// Finds Π₀ so that the closed-loop Artstein covariance equals
/// `sigma_y_target` at `T − h`, starting from Σ_Y(0) = 0.
pub fn synthesize_covariance_steering(
    sys: &DelayedSystem,
    sigma_y_target: &Mat,
    r: &dyn MatrixFn,
    grid: TimeGrid,
    opts: &ShootingOptions,
) -> Result<ShootingResult> {
    let n = sys.dim_state();
    check_control_grid(sys, &grid)?;
    if sigma_y_target.shape() != (n, n) {
        return Err(Error::Shape {
            what: "steering target".into(),
            expected: (n, n),
            got: sigma_y_target.shape(),
        });
    }
    ensure_spd(sigma_y_target, "steering target")?;
    let report = controllability_report(sys, opts.tau_samples)?;
    if !report.is_controllable() {
        return Err(Error::Controllability(report.verdict_line()));
    }
    let coeffs = SteeringCoefficients::new(sys, r, grid)?;
    let shooter = Shooter {
        coeffs: &coeffs,
        target: sigma_y_target,
        scale: sigma_y_target.norm(),
        n,
        blow_up: opts.blow_up,
    };
    let p = triangle_len(n);
    let mut x = vec![0.0; p];
    let mut f = shooter
        .residual(&x)
        .ok_or_else(|| Error::Domain("zero gain schedule escaped".into()))?;
    let mut res = norm(&f);
    let mut iterations = 0;
    while res > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let columns: Option<Vec<Vec<f64>>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let step = opts.fd_step * x[j].abs().max(1.0);
                let mut xp = x.clone();
                xp[j] += step;
                if let Some(fp) = shooter.residual(&xp) {
                    return Some(fp.iter().zip(&f).map(|(a, b)| (a - b) / step).collect());
                }
                xp[j] = x[j] - step;
                let fm = shooter.residual(&xp)?;
                Some(f.iter().zip(&fm).map(|(a, b)| (a - b) / step).collect())
            })
            .collect();
        let Some(columns) = columns else { break };
        let jac = Mat::from_fn(p, p, |i, j| columns[j][i]);
        let rhs = -Vector::from_vec(f.clone());
        let Some(delta) = jac.lu().solve(&rhs) else { break };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(ft) = shooter.residual(&trial) {
                let rt = norm(&ft);
                if rt < res {
                    accepted = Some((trial, ft, rt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xn, fnew, rn)) => {
                x = xn;
                f = fnew;
                res = rn;
            }
            None => break,
        }
    }
    let pi0 = unpack(&x, n);
    let (ps, ss) = coeffs
        .propagate(&pi0, opts.blow_up, true)
        .ok_or(Error::RiccatiBlowUp {
            time: grid.t_end(),
            threshold: opts.blow_up,
        })?;
    let schedule = MatrixPath::new(grid, ps)?;
    let predicted_sigma_y = MatrixPath::new(grid, ss)?;
    let terminal = predicted_sigma_y.last();
    let residual_norm = (terminal - sigma_y_target).norm() / sigma_y_target.norm();
    let law = FeedbackLaw::from_schedule(sys, LawKind::Steering, schedule, r)?;
    let predicted_sigma_x = predict_state_covariance(sys, &predicted_sigma_y)?;
    let result = ShootingResult {
        law,
        pi0,
        residual_norm,
        iterations,
        predicted_sigma_y,
        predicted_sigma_x,
        predicted_terminal_mean: None,
    };
    if residual_norm > opts.tol {
        return Err(Error::NonConvergence {
            residual: residual_norm,
            iterations,
            best: Box::new(result),
        });
    }
    Ok(result)
}

/// Σ_X(t) on `[h, T]` from Σ_Y(t − h) on `[0, T − h]`.
pub fn predict_state_covariance(
    sys: &DelayedSystem,
    sigma_y: &CovarianceTrajectory,
) -> Result<CovarianceTrajectory> {
    let h = sys.delay();
    let grid = sigma_y.grid().shifted(h);
    let thresholds = analysis::sigma_min_profile(sys, &grid)?;
    let values = sigma_y
        .values()
        .iter()
        .zip(grid.times())
        .zip(thresholds)
        .map(|((sy, t), floor)| {
            let phi = sys.transition(t, t - h);
            symmetrize(&(&phi * sy * phi.transpose() + floor))
        })
        .collect();
    MatrixPath::new(grid, values)
}

/// End-to-end steering of the original system: reduce, map the target to
/// Artstein coordinates, shoot for the covariance branch, and attach the
/// drift-compensating feedforward for the mean.
pub fn steer_to_state_covariance(
    p: &SteeringProblem,
    r: &dyn MatrixFn,
    grid: TimeGrid,
    opts: &ShootingOptions,
) -> Result<ShootingResult> {
    let reduced = reduce_problem(p)?;
    ensure_psd(&p.target_covariance, "target covariance")?;
    let sigma_y_target = analysis::target_for_artstein(&reduced.system, &p.target_covariance)?;
    let mut result =
        synthesize_covariance_steering(&reduced.system, &sigma_y_target, r, grid, opts)?;
    let ff = drift_feedforward(&reduced, grid)?;
    result.predicted_terminal_mean = Some(ff.predicted_terminal_mean(&p.system)?);
    result.law = result.law.with_feedforward(ff)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeVaryingMatrix;

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

    #[test]
    fn natural_covariance_trivial_and_ou() {
        let quiet = scalar_system(-1.0, 0.0, 0.5, 2.5);
        let grid = quiet.control_grid(100).unwrap();
        let path = natural_covariance(&quiet, grid).unwrap();
        assert!(path.values().iter().all(|m| m.amax() == 0.0));

        let sys = scalar_system(-1.0, 1.0, 0.5, 2.5);
        let path = natural_covariance(&sys, sys.control_grid(400).unwrap()).unwrap();
        assert!((path.last()[(0, 0)] - 0.490842).abs() < 1e-6);
    }

    #[test]
    fn natural_target_needs_no_feedback() {
        let sys = scalar_system(-0.5, 1.0, 0.2, 1.2);
        let grid = sys.control_grid(200).unwrap();
        let natural = natural_covariance(&sys, grid).unwrap();
        let result = synthesize_covariance_steering(
            &sys,
            natural.last(),
            &Mat::identity(1, 1),
            grid,
            &ShootingOptions::default(),
        )
        .unwrap();
        assert_eq!(result.pi0[(0, 0)], 0.0);
        assert_eq!(result.iterations, 0);
        assert!(result.residual_norm <= 1e-10);
        assert!(result.law.gain().values().iter().all(|k| k.amax() == 0.0));
    }

    #[test]
    fn uncontrollable_system_is_rejected() {
        let sys = DelayedSystem::new(
            constant(1, 1, &[0.0]),
            constant(1, 1, &[0.0]),
            constant(1, 1, &[0.0]),
            constant(1, 1, &[1.0]),
            0.2,
            1.2,
            Vector::zeros(1),
        )
        .unwrap();
        let grid = sys.control_grid(50).unwrap();
        let err = synthesize_covariance_steering(
            &sys,
            &Mat::identity(1, 1),
            &Mat::identity(1, 1),
            grid,
            &ShootingOptions::default(),
        );
        assert!(matches!(err, Err(Error::Controllability(_))));
    }

    #[test]
    fn packing_preserves_frobenius_norm() {
        let m = Mat::from_row_slice(3, 3, &[1.0, 2.0, -1.0, 2.0, 0.5, 3.0, -1.0, 3.0, 4.0]);
        assert!((norm(&pack_weighted(&m)) - m.norm()).abs() < 1e-12);
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, 4.0];
        assert_eq!(unpack(&x, 3), m);
    }
}
