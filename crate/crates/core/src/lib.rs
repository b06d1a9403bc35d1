//! Mean and covariance steering for linear stochastic systems with a
//! constant input delay.
//!
//! The delayed system dX = (A X + B U(t−h) + r) dt + σ dW is reduced to a
//! delay-free one through the Artstein transform. On top of that reduction
//! the crate provides the delay-induced covariance floor, exact covariance
//! steering by shooting, finite-horizon LQ synthesis with its cost
//! decomposition, and a reproducible Euler–Maruyama ensemble simulator.

pub mod analysis;
pub mod building;
pub mod error;
pub mod law;
pub mod lq;
pub mod model;
pub mod numerics;
pub mod report;
pub mod sim;
pub mod steering;

pub use error::{Error, Result};
pub use law::{FeedbackLaw, LawKind};
pub use model::{DelayedSystem, SteeringProblem, TimeVaryingMatrix};
pub use numerics::{Mat, MatrixFn, MatrixPath, TimeGrid, Vector};
