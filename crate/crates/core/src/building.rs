//! Two-state building temperature model with a delayed heat source.
//!
//! State 1 is the indoor temperature (actuated), state 2 the external
//! temperature, an Ornstein–Uhlenbeck process whose mean follows the
//! forecast `T_p(t) = 5 + 5 cos(0.004 t)`.

use crate::error::Result;
use crate::model::{DelayedSystem, Resolution, TimeVaryingMatrix};
use crate::numerics::{Mat, Vector};

pub const DEFAULT_DELAY: f64 = 500.0;
/// Five days at minute granularity.
pub const DEFAULT_HORIZON: f64 = 7200.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingParams {
    pub r_e: f64,
    pub r_u: f64,
    pub theta: f64,
    pub t_eq: f64,
    pub sigma_e: f64,
    pub sigma_i: f64,
    pub forecast_mean: f64,
    pub forecast_amplitude: f64,
    pub forecast_frequency: f64,
}

impl Default for BuildingParams {
    fn default() -> Self {
        Self {
            r_e: 5e-4,
            r_u: 2e-4,
            theta: 3.5e-4,
            t_eq: 20.0,
            sigma_e: 0.1,
            sigma_i: 0.05,
            forecast_mean: 5.0,
            forecast_amplitude: 5.0,
            forecast_frequency: 0.004,
        }
    }
}

impl BuildingParams {
    pub fn a(&self) -> Mat {
        Mat::from_row_slice(2, 2, &[-self.r_e, self.r_e, 0.0, -self.theta])
    }

    pub fn b(&self) -> Mat {
        Mat::from_row_slice(2, 1, &[self.r_u, 0.0])
    }

    pub fn sigma(&self) -> Mat {
        Mat::from_row_slice(2, 1, &[self.sigma_i, self.sigma_e])
    }

    /// Forecast external temperature `T_p(t)`.
    pub fn forecast(&self, t: f64) -> f64 {
        self.forecast_mean + self.forecast_amplitude * (self.forecast_frequency * t).cos()
    }

    pub fn forecast_rate(&self, t: f64) -> f64 {
        -self.forecast_amplitude * self.forecast_frequency * (self.forecast_frequency * t).sin()
    }

    /// r(t) = [−R_e T_eq, θ T_p(t) + Ṫ_p(t)]ᵀ.
    pub fn drift(&self, t: f64) -> Vector {
        Vector::from_vec(vec![
            -self.r_e * self.t_eq,
            self.theta * self.forecast(t) + self.forecast_rate(t),
        ])
    }

    /// Indoor temperature at the set point, external temperature on forecast.
    pub fn initial_state(&self, set_point: f64) -> Vector {
        Vector::from_vec(vec![set_point, self.forecast(0.0)])
    }

    pub fn system(&self, delay: f64, horizon: f64, x0: Vector) -> Result<DelayedSystem> {
        self.system_with(delay, horizon, x0, Resolution::default())
    }

    pub fn system_with(
        &self,
        delay: f64,
        horizon: f64,
        x0: Vector,
        resolution: Resolution,
    ) -> Result<DelayedSystem> {
        DelayedSystem::with_resolution(
            TimeVaryingMatrix::Constant(self.a()),
            TimeVaryingMatrix::Constant(self.b()),
            TimeVaryingMatrix::BuildingDrift(*self),
            TimeVaryingMatrix::Constant(self.sigma()),
            delay,
            horizon,
            x0,
            resolution,
        )
    }

    /// Open-loop heating that holds the mean indoor temperature at
    /// `set_point` from time `h` on, given the external temperature sits on
    /// its forecast: R_u u(t) = R_e (set_point + T_eq − T_p(t + h)).
    pub fn holding_control(&self, set_point: f64, delay: f64, t: f64) -> f64 {
        self.r_e * (set_point + self.t_eq - self.forecast(t + delay)) / self.r_u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::MatrixFn;

    #[test]
    fn matrices_match_the_model() {
        let p = BuildingParams::default();
        let sys = p.system(DEFAULT_DELAY, DEFAULT_HORIZON, p.initial_state(20.0)).unwrap();
        assert_eq!(sys.dim_state(), 2);
        assert_eq!(sys.dim_control(), 1);
        assert_eq!(sys.a(0.0), Mat::from_row_slice(2, 2, &[-5e-4, 5e-4, 0.0, -3.5e-4]));
        assert_eq!(sys.b(0.0), Mat::from_row_slice(2, 1, &[2e-4, 0.0]));
        assert_eq!(sys.sigma(0.0).as_slice(), &[0.05, 0.1]);
        let r = sys.drift_fn().eval(100.0);
        assert!((r[(0, 0)] + 0.01).abs() < 1e-15);
        let tp = 5.0 + 5.0 * 0.4f64.cos();
        let expected = 3.5e-4 * tp - 0.02 * 0.4f64.sin();
        assert!((r[(1, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn external_mean_tracks_forecast() {
        // d/dt T_p = −θ T_p + (θ T_p + Ṫ_p) along the forecast.
        let p = BuildingParams::default();
        for t in [0.0, 123.0, 4000.0] {
            let r = p.drift(t);
            let rate = -p.theta * p.forecast(t) + r[1];
            assert!((rate - p.forecast_rate(t)).abs() < 1e-15);
        }
    }
}
