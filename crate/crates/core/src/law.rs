//! Feedback laws acting on the Artstein state.

use crate::error::{Error, Result};
use crate::model::{check_control_grid, DelayedSystem, Feedforward};
use crate::numerics::{ensure_spd, Mat, MatrixFn, MatrixPath, TimeGrid, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    /// Exact covariance steering (forward Riccati from a shot Π₀).
    Steering,
    /// Finite-horizon LQ (backward Riccati).
    Lq,
    /// Gain built directly, e.g. full-actuation pole placement.
    StaticGain,
    /// No feedback.
    Open,
}

/// `U(t) = u_ff(t) − K(t) (Y(t) − y_ref(t))` on `[0, T − h]`, zero afterwards.
///
/// Without a feedforward, `u_ff = 0` and `y_ref = 0`. For Riccati laws
/// `K = R⁻¹ B̄ᵀ Π` and the schedule `Π` is kept alongside.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    kind: LawKind,
    gain: MatrixPath,
    schedule: Option<MatrixPath>,
    feedforward: Option<Feedforward>,
}

impl FeedbackLaw {
    /// Gains `K(t) = R(t)⁻¹ B̄(t)ᵀ Π(t)` from a symmetric schedule.
    pub fn from_schedule(
        sys: &DelayedSystem,
        kind: LawKind,
        schedule: MatrixPath,
        r: &dyn MatrixFn,
    ) -> Result<Self> {
        check_control_grid(sys, schedule.grid())?;
        let bbar = sys.bbar_fn();
        let gains = schedule
            .iter()
            .map(|(t, p)| Ok(r_inverse(r, t)? * bbar.eval(t).transpose() * p))
            .collect::<Result<Vec<_>>>()?;
        let gain = MatrixPath::new(*schedule.grid(), gains)?;
        Ok(Self {
            kind,
            gain,
            schedule: Some(schedule),
            feedforward: None,
        })
    }

    /// Law with explicit `m × n` gains.
    pub fn from_gains(sys: &DelayedSystem, kind: LawKind, gain: MatrixPath) -> Result<Self> {
        check_control_grid(sys, gain.grid())?;
        let expected = (sys.dim_control(), sys.dim_state());
        if gain.shape() != expected {
            return Err(Error::Shape {
                what: "feedback gain".into(),
                expected,
                got: gain.shape(),
            });
        }
        Ok(Self {
            kind,
            gain,
            schedule: None,
            feedforward: None,
        })
    }

    pub fn open_loop(sys: &DelayedSystem, grid: TimeGrid) -> Result<Self> {
        let zero = Mat::zeros(sys.dim_control(), sys.dim_state());
        let gain = MatrixPath::new(grid, vec![zero; grid.len()])?;
        Self::from_gains(sys, LawKind::Open, gain)
    }

    pub fn with_feedforward(mut self, ff: Feedforward) -> Result<Self> {
        if ff.grid() != self.grid() {
            return Err(Error::Grid("feedforward and gain grids differ".into()));
        }
        self.feedforward = Some(ff);
        Ok(self)
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn grid(&self) -> &TimeGrid {
        self.gain.grid()
    }

    pub fn gain(&self) -> &MatrixPath {
        &self.gain
    }

    pub fn schedule(&self) -> Option<&MatrixPath> {
        self.schedule.as_ref()
    }

    pub fn feedforward(&self) -> Option<&Feedforward> {
        self.feedforward.as_ref()
    }

    /// Control at law node `k` for Artstein state `y`.
    pub fn control_at(&self, k: usize, y: &Vector) -> Vector {
        match &self.feedforward {
            None => -(self.gain.at(k) * y),
            Some(ff) => ff.control_at(k) - self.gain.at(k) * (y - ff.reference_at(k)),
        }
    }

    /// A(t) − B̄(t) K(t), with gains interpolated between nodes.
    pub fn closed_loop<'a>(&'a self, sys: &'a DelayedSystem) -> ClosedLoop<'a> {
        ClosedLoop { sys, law: self }
    }
}

pub struct ClosedLoop<'a> {
    sys: &'a DelayedSystem,
    law: &'a FeedbackLaw,
}

impl MatrixFn for ClosedLoop<'_> {
    fn eval(&self, t: f64) -> Mat {
        self.sys.a(t) - self.sys.bbar_fn().eval(t) * self.law.gain.eval(t)
    }

    fn shape(&self) -> (usize, usize) {
        (self.sys.dim_state(), self.sys.dim_state())
    }
}

pub(crate) fn r_inverse(r: &dyn MatrixFn, t: f64) -> Result<Mat> {
    let rt = r.eval(t);
    ensure_spd(&rt, "control weight R")?;
    rt.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Domain("control weight R is not positive definite".into()))
}

/// σσᵀ of a system as a coefficient function.
pub(crate) struct Diffusion<'a>(pub &'a DelayedSystem);

impl MatrixFn for Diffusion<'_> {
    fn eval(&self, t: f64) -> Mat {
        self.0.diffusion(t)
    }

    fn shape(&self) -> (usize, usize) {
        (self.0.dim_state(), self.0.dim_state())
    }
}
