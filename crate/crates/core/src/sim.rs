//! Seeded Euler–Maruyama Monte Carlo of the delayed closed loop.
//!
//! Each path carries the state `X`, the transform state `Z` with
//! dZ = (A Z + B̄ U − B U(t−h)) dt, Z(0) = 0, so that `Y = X + Z`, and a ring
//! buffer holding the last `h / dt` controls.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::analysis::sigma_min;
use crate::error::{Error, Result};
use crate::law::FeedbackLaw;
use crate::model::DelayedSystem;
use crate::numerics::{symmetrize, Mat, MatrixPath, TimeGrid, Vector};
use crate::report::{indexed_labels, upper_labels, upper_values, write_header, write_row};

/// Paths per accumulation chunk; fixed so the reduction tree never depends
/// on the number of workers.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub paths: usize,
    pub master_seed: u64,
    /// Record every `record_stride`-th step; must divide the step count.
    pub record_stride: usize,
    /// Keep the first `retain_paths` paths in full.
    pub retain_paths: usize,
}

impl SimulationConfig {
    pub fn new(dt: f64, paths: usize, master_seed: u64) -> Self {
        Self {
            dt,
            paths,
            master_seed,
            record_stride: 1,
            retain_paths: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn retaining(mut self, count: usize) -> Self {
        self.retain_paths = count;
        self
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of path `index` under `master_seed`.
pub fn path_seed(master_seed: u64, index: u64) -> u64 {
    mix64(mix64(master_seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let q = num / den;
    let k = q.round();
    (k >= 1.0 && (q - k).abs() <= 1e-9 * k).then_some(k as usize)
}

/// Recorded trajectory of one path.
#[derive(Debug, Clone)]
pub struct SimulatedPath {
    pub grid: TimeGrid,
    pub x: Vec<Vector>,
    pub y: Vec<Vector>,
    /// Control computed at each recorded node (zero after `T − h`).
    pub u: Vec<Vector>,
    /// Control consumed by the plant at each recorded node, `U(t − h)`.
    pub u_delayed: Vec<Vector>,
}

/// Per-step coefficients shared by all paths.
struct Stepper {
    n: usize,
    m: usize,
    dt: f64,
    steps: usize,
    delay_steps: usize,
    stride: usize,
    law_steps: usize,
    a: Vec<Mat>,
    b: Vec<Mat>,
    bbar: Vec<Mat>,
    r: Vec<Vector>,
    sigma: Vec<Vector>,
    gain: Vec<Mat>,
    offset: Vec<Vector>,
    x0: Vector,
    sim_grid: TimeGrid,
    record_grid: TimeGrid,
}

impl Stepper {
    fn new(sys: &DelayedSystem, law: &FeedbackLaw, cfg: &SimulationConfig) -> Result<Self> {
        if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
            return Err(Error::Parameter(format!("dt must be positive, got {}", cfg.dt)));
        }
        if cfg.paths == 0 {
            return Err(Error::Parameter("at least one path is required".into()));
        }
        if cfg.record_stride == 0 {
            return Err(Error::Parameter("record stride must be positive".into()));
        }
        let (h, horizon) = (sys.delay(), sys.horizon());
        let delay_steps = integer_ratio(h, cfg.dt)
            .ok_or_else(|| Error::Grid(format!("dt = {} does not divide the delay {h}", cfg.dt)))?;
        let steps = integer_ratio(horizon, cfg.dt)
            .ok_or_else(|| Error::Grid(format!("dt = {} does not divide the horizon {horizon}", cfg.dt)))?;
        if steps % cfg.record_stride != 0 {
            return Err(Error::Grid(format!(
                "record stride {} does not divide {steps} steps",
                cfg.record_stride
            )));
        }
        let law_grid = *law.grid();
        let law_steps = law_grid.steps();
        if law_steps + delay_steps != steps || (law_grid.dt() - cfg.dt).abs() > 1e-9 * cfg.dt {
            return Err(Error::Grid(format!(
                "law grid step {} does not coincide with dt = {}",
                law_grid.dt(),
                cfg.dt
            )));
        }
        let (n, m) = (sys.dim_state(), sys.dim_control());
        let sim_grid = TimeGrid::new(0.0, horizon, steps)?;
        let record_grid = TimeGrid::new(0.0, horizon, steps / cfg.record_stride)?;
        let bbar_fn = sys.bbar_fn();
        let times: Vec<f64> = sim_grid.times().collect();
        let mut a = Vec::with_capacity(steps);
        let mut b = Vec::with_capacity(steps);
        let mut bbar = Vec::with_capacity(law_steps);
        let mut r = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        for (k, &t) in times[..steps].iter().enumerate() {
            a.push(sys.a(t));
            b.push(sys.b(t));
            r.push(sys.drift(t));
            sigma.push(sys.sigma(t));
            if k < law_steps {
                bbar.push(crate::numerics::MatrixFn::eval(&bbar_fn, t));
            }
        }
        let mut gain = Vec::with_capacity(law_grid.len());
        let mut offset = Vec::with_capacity(law_grid.len());
        for j in 0..law_grid.len() {
            let kj = law.gain().at(j).clone();
            let c = match law.feedforward() {
                None => Vector::zeros(m),
                Some(ff) => ff.control_at(j) + &kj * ff.reference_at(j),
            };
            gain.push(kj);
            offset.push(c);
        }
        Ok(Self {
            n,
            m,
            dt: cfg.dt,
            steps,
            delay_steps,
            stride: cfg.record_stride,
            law_steps,
            a,
            b,
            bbar,
            r,
            sigma,
            gain,
            offset,
            x0: sys.initial_state().clone(),
            sim_grid,
            record_grid,
        })
    }

    fn run(&self, seed: u64, index: usize) -> Result<SimulatedPath> {
        let (n, m, dt) = (self.n, self.m, self.dt);
        let sqrt_dt = dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = self.x0.clone();
        let mut z = Vector::zeros(n);
        let mut ring = vec![Vector::zeros(m); self.delay_steps];
        let records = self.record_grid.len();
        let mut out = SimulatedPath {
            grid: self.record_grid,
            x: Vec::with_capacity(records),
            y: Vec::with_capacity(records),
            u: Vec::with_capacity(records),
            u_delayed: Vec::with_capacity(records),
        };
        let mut dx = Vector::zeros(n);
        let mut dz = Vector::zeros(n);
        for k in 0..=self.steps {
            let y = &x + &z;
            let u = if k < self.law_steps {
                &self.offset[k] - &self.gain[k] * &y
            } else {
                Vector::zeros(m)
            };
            let slot = k % self.delay_steps;
            let u_del = std::mem::replace(&mut ring[slot], u.clone());
            if k % self.stride == 0 {
                out.x.push(x.clone());
                out.y.push(y);
                out.u.push(u.clone());
                out.u_delayed.push(u_del.clone());
            }
            if k == self.steps {
                break;
            }
            let xi: f64 = StandardNormal.sample(&mut rng);
            dx.gemv(1.0, &self.a[k], &x, 0.0);
            dx.gemv(1.0, &self.b[k], &u_del, 1.0);
            dx += &self.r[k];
            dz.gemv(1.0, &self.a[k], &z, 0.0);
            dz.gemv(-1.0, &self.b[k], &u_del, 1.0);
            if k < self.law_steps {
                dz.gemv(1.0, &self.bbar[k], &u, 1.0);
            }
            x.axpy(dt, &dx, 1.0);
            x.axpy(xi * sqrt_dt, &self.sigma[k], 1.0);
            z.axpy(dt, &dz, 1.0);
            if !x.iter().chain(z.iter()).all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    path: index,
                    time: self.sim_grid.time(k + 1),
                });
            }
        }
        Ok(out)
    }
}

/// One path of the closed loop driven by `path_seed`.
pub fn simulate_path(
    sys: &DelayedSystem,
    law: &FeedbackLaw,
    cfg: &SimulationConfig,
    path_seed: u64,
) -> Result<SimulatedPath> {
    Stepper::new(sys, law, cfg)?.run(path_seed, 0)
}

/// Running first and second moments of X and Y at every recorded node.
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean_x: Vec<Vector>,
    m2_x: Vec<Mat>,
    mean_y: Vec<Vector>,
    m2_y: Vec<Mat>,
}

impl Moments {
    fn from_path(p: &SimulatedPath) -> Self {
        let n = p.x[0].len();
        Self {
            count: 1.0,
            mean_x: p.x.clone(),
            m2_x: vec![Mat::zeros(n, n); p.x.len()],
            mean_y: p.y.clone(),
            m2_y: vec![Mat::zeros(n, n); p.y.len()],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        let total = self.count + other.count;
        let wa = self.count * other.count / total;
        let wb = other.count / total;
        merge_side(&mut self.mean_x, &mut self.m2_x, &other.mean_x, &other.m2_x, wa, wb);
        merge_side(&mut self.mean_y, &mut self.m2_y, &other.mean_y, &other.m2_y, wa, wb);
        self.count = total;
        self
    }
}

fn merge_side(means: &mut [Vector], m2s: &mut [Mat], om: &[Vector], o2: &[Mat], wa: f64, wb: f64) {
    for ((mean, m2), (omean, om2)) in means.iter_mut().zip(m2s.iter_mut()).zip(om.iter().zip(o2)) {
        let delta = omean - &*mean;
        *m2 += om2;
        m2.ger(wa, &delta, &delta, 1.0);
        mean.axpy(wb, &delta, 1.0);
    }
}

/// Adjacent-pair reduction; the tree shape depends only on the input length.
fn pairwise(mut level: Vec<Moments>) -> Moments {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        level = next;
    }
    level.pop().expect("at least one path")
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: SimulationConfig,
    pub grid: TimeGrid,
    pub mean: Vec<Vector>,
    /// Sample covariance of X with 1/(N−1) normalization.
    pub covariance: MatrixPath,
    /// Normal-theory standard error of each covariance entry.
    pub covariance_stderr: MatrixPath,
    pub mean_y: Vec<Vector>,
    pub covariance_y: MatrixPath,
    pub paths: Vec<SimulatedPath>,
}

fn covariance_path(grid: TimeGrid, m2: &[Mat], count: f64) -> Result<MatrixPath> {
    let values = m2
        .iter()
        .map(|m| {
            if count > 1.0 {
                symmetrize(&(m / (count - 1.0)))
            } else {
                Mat::zeros(m.nrows(), m.ncols())
            }
        })
        .collect();
    MatrixPath::new(grid, values)
}

/// sqrt((Σ_ii Σ_jj + Σ_ij²) / (N − 1)) entrywise.
fn covariance_stderr(cov: &MatrixPath, count: f64) -> MatrixPath {
    cov.map(|_, s| {
        if count <= 1.0 {
            return Mat::zeros(s.nrows(), s.ncols());
        }
        Mat::from_fn(s.nrows(), s.ncols(), |i, j| {
            ((s[(i, i)] * s[(j, j)] + s[(i, j)] * s[(i, j)]) / (count - 1.0)).sqrt()
        })
    })
}

/// N independent paths with counter-derived seeds and their moments.
pub fn simulate_ensemble(sys: &DelayedSystem, law: &FeedbackLaw, cfg: &SimulationConfig) -> Result<Ensemble> {
    let stepper = Stepper::new(sys, law, cfg)?;
    let chunks = cfg.paths.div_ceil(CHUNK);
    let results: Vec<Result<(Moments, Vec<SimulatedPath>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cfg.paths);
            let mut acc: Option<Moments> = None;
            let mut kept = Vec::new();
            for i in lo..hi {
                let path = stepper.run(path_seed(cfg.master_seed, i as u64), i)?;
                let single = Moments::from_path(&path);
                acc = Some(match acc {
                    None => single,
                    Some(a) => a.merge(single),
                });
                if i < cfg.retain_paths {
                    kept.push(path);
                }
            }
            Ok((acc.expect("non-empty chunk"), kept))
        })
        .collect();
    let mut parts = Vec::with_capacity(chunks);
    let mut paths = Vec::new();
    for r in results {
        let (m, kept) = r?;
        parts.push(m);
        paths.extend(kept);
    }
    let total = pairwise(parts);
    let grid = stepper.record_grid;
    let covariance = covariance_path(grid, &total.m2_x, total.count)?;
    let covariance_stderr = covariance_stderr(&covariance, total.count);
    let covariance_y = covariance_path(grid, &total.m2_y, total.count)?;
    Ok(Ensemble {
        config: *cfg,
        grid,
        mean: total.mean_x,
        covariance,
        covariance_stderr,
        mean_y: total.mean_y,
        covariance_y,
        paths,
    })
}

impl Ensemble {
    /// moments.csv: t, mean_i, cov upper triangle, stderr upper triangle.
    pub fn write_moments_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let n = self.mean.first().map_or(0, |v| v.len());
        let mut header = vec!["t".to_string()];
        header.extend(indexed_labels("mean", n));
        header.extend(upper_labels("cov", n));
        header.extend(upper_labels("stderr", n));
        write_header(w, &header)?;
        for (k, t) in self.grid.times().enumerate() {
            let mut row = vec![t];
            row.extend(self.mean[k].iter());
            row.extend(upper_values(self.covariance.at(k)));
            row.extend(upper_values(self.covariance_stderr.at(k)));
            write_row(w, &row)?;
        }
        Ok(())
    }

    /// paths.csv: path_id, t, x_i, u_i for the retained paths (at most `cap`).
    pub fn write_paths_csv<W: Write>(&self, w: &mut W, cap: usize) -> io::Result<()> {
        let n = self.mean.first().map_or(0, |v| v.len());
        let m = self
            .paths
            .first()
            .and_then(|p| p.u.first())
            .map_or(0, |u| u.len());
        let mut header = vec!["path_id".to_string(), "t".to_string()];
        header.extend(indexed_labels("x", n));
        header.extend(indexed_labels("u", m));
        write_header(w, &header)?;
        for (id, p) in self.paths.iter().take(cap).enumerate() {
            for (k, t) in p.grid.times().enumerate() {
                let mut row = vec![t];
                row.extend(p.x[k].iter());
                row.extend(p.u[k].iter());
                write!(w, "{id},")?;
                write_row(w, &row)?;
            }
        }
        Ok(())
    }
}

/// Pooled-standard-error residual of Σ̂_X(t) − Φ_A(t,t−h) Σ̂_Y(t−h) Φ_Aᵀ − Σ_min(t)
/// at recorded nodes `t ≥ h`, computed from the retained paths.
pub fn lemma2_residual(ensemble: &Ensemble, sys: &DelayedSystem) -> Result<Vec<(f64, f64)>> {
    let paths = &ensemble.paths;
    if paths.len() < 2 {
        return Err(Error::Parameter("at least two retained paths are required".into()));
    }
    let grid = ensemble.grid;
    let lag = integer_ratio(sys.delay(), grid.dt())
        .ok_or_else(|| Error::Grid("recorded step does not divide the delay".into()))?;
    let count = paths.len() as f64;
    let n = sys.dim_state();
    let mut out = Vec::new();
    for k in lag..grid.len() {
        let t = grid.time(k);
        let phi = sys.transition(t, t - sys.delay());
        let w: Vec<Vector> = paths.iter().map(|p| &phi * &p.y[k - lag]).collect();
        let mean_x = paths.iter().fold(Vector::zeros(n), |acc, p| acc + &p.x[k]) / count;
        let mean_w = w.iter().fold(Vector::zeros(n), |acc, v| acc + v) / count;
        let qs: Vec<Mat> = paths
            .iter()
            .zip(&w)
            .map(|(p, wi)| {
                let dx = &p.x[k] - &mean_x;
                let dw = wi - &mean_w;
                (&dx * dx.transpose() - &dw * dw.transpose()) * (count / (count - 1.0))
            })
            .collect();
        let q_mean = qs.iter().fold(Mat::zeros(n, n), |acc, q| acc + q) / count;
        let q_var = qs.iter().fold(Mat::zeros(n, n), |acc, q| {
            let d = q - &q_mean;
            acc + d.component_mul(&d)
        }) / (count - 1.0);
        let diff = &q_mean - sigma_min(sys, t)?;
        let pooled = (q_var.sum() / count).sqrt();
        let d = diff.norm();
        let residual = if d <= 1e-14 * (1.0 + q_mean.norm()) {
            0.0
        } else if pooled == 0.0 {
            f64::INFINITY
        } else {
            d / pooled
        };
        out.push((t, residual));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Feedforward, TimeVaryingMatrix};

    fn scalar(a: f64, sigma: f64, h: f64, horizon: f64, x0: f64) -> DelayedSystem {
        DelayedSystem::new(
            TimeVaryingMatrix::Constant(Mat::from_element(1, 1, a)),
            TimeVaryingMatrix::Constant(Mat::from_element(1, 1, 1.0)),
            TimeVaryingMatrix::Constant(Mat::zeros(1, 1)),
            TimeVaryingMatrix::Constant(Mat::from_element(1, 1, sigma)),
            h,
            horizon,
            Vector::from_element(1, x0),
        )
        .unwrap()
    }

    fn open(sys: &DelayedSystem, steps: usize) -> FeedbackLaw {
        FeedbackLaw::open_loop(sys, sys.control_grid(steps).unwrap()).unwrap()
    }

    #[test]
    fn seeds_differ_and_repeat() {
        assert_eq!(path_seed(7, 3), path_seed(7, 3));
        assert_ne!(path_seed(7, 3), path_seed(7, 4));
        assert_ne!(path_seed(7, 3), path_seed(8, 3));
    }

    #[test]
    fn noiseless_open_loop_follows_the_flow() {
        let sys = scalar(-0.7, 0.0, 0.5, 2.0, 1.5);
        let law = open(&sys, 1500);
        let cfg = SimulationConfig::new(1e-3, 1, 0);
        let p = simulate_path(&sys, &law, &cfg, 1).unwrap();
        let last = p.x.last().unwrap()[0];
        assert!((last - 1.5 * (-1.4f64).exp()).abs() < 1e-3);
        for (x, y) in p.x.iter().zip(&p.y) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn ramp_input_is_consumed_after_the_delay() {
        let sys = scalar(0.0, 0.0, 0.5, 2.0, 0.0);
        let grid = sys.control_grid(60).unwrap();
        let ff = Feedforward::from_control(&sys, grid, |t| Vector::from_element(1, t)).unwrap();
        let law = open(&sys, 60).with_feedforward(ff).unwrap();
        let cfg = SimulationConfig::new(0.025, 1, 0);
        let p = simulate_path(&sys, &law, &cfg, 0).unwrap();
        for (k, t) in p.grid.times().enumerate() {
            let expected = if k + 1 < p.grid.len() { (t - 0.5).max(0.0) } else { 0.0 };
            assert!((p.u_delayed[k][0] - expected).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn single_path_ensemble_is_degenerate() {
        let sys = scalar(-1.0, 1.0, 0.5, 1.0, 0.0);
        let law = open(&sys, 10);
        let cfg = SimulationConfig::new(0.05, 1, 3).retaining(1);
        let e = simulate_ensemble(&sys, &law, &cfg).unwrap();
        assert!(e.covariance.values().iter().all(|c| c.amax() == 0.0));
        let p = simulate_path(&sys, &law, &cfg, path_seed(3, 0)).unwrap();
        assert_eq!(e.mean, p.x);
    }

    #[test]
    fn noiseless_ensemble_has_zero_covariance() {
        let sys = scalar(-1.0, 0.0, 0.5, 1.0, 2.0);
        let law = open(&sys, 10);
        let e = simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 130, 3)).unwrap();
        assert!(e.covariance.values().iter().all(|c| c.amax() == 0.0));
        let res = lemma2_residual(
            &simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 10, 3).retaining(10)).unwrap(),
            &sys,
        )
        .unwrap();
        assert!(res.iter().all(|(_, r)| *r == 0.0));
    }

    #[test]
    fn grids_must_align() {
        let sys = scalar(-1.0, 1.0, 0.5, 1.0, 0.0);
        let law = open(&sys, 10);
        assert!(simulate_ensemble(&sys, &law, &SimulationConfig::new(0.03, 4, 0)).is_err());
        assert!(simulate_ensemble(&sys, &law, &SimulationConfig::new(0.1, 4, 0)).is_err());
        assert!(simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 4, 0).with_stride(3)).is_err());
        assert!(simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 0, 0)).is_err());
    }

    #[test]
    fn divergence_reports_path_and_time() {
        let sys = scalar(0.0, 1.0, 0.5, 1.0, 1.0);
        let grid = sys.control_grid(10).unwrap();
        let gain = MatrixPath::new(grid, vec![Mat::from_element(1, 1, -1e200); grid.len()]).unwrap();
        let law = FeedbackLaw::from_gains(&sys, crate::law::LawKind::StaticGain, gain).unwrap();
        let err = simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { path: 0, .. }));
    }

    #[test]
    fn moments_csv_layout() {
        let sys = scalar(-1.0, 1.0, 0.5, 1.0, 0.0);
        let law = open(&sys, 10);
        let e = simulate_ensemble(&sys, &law, &SimulationConfig::new(0.05, 5, 0).with_stride(5).retaining(2)).unwrap();
        let mut buf = Vec::new();
        e.write_moments_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,mean_1,cov_1_1,stderr_1_1");
        assert_eq!(lines.len(), 1 + 5);
        let mut buf = Vec::new();
        e.write_paths_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "path_id,t,x_1,u_1");
        assert_eq!(text.lines().count(), 1 + 5);
    }
}
