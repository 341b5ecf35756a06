//! Stochastic observation scheduling for several independent linear targets
//! that share a single sensor.
//!
//! The crate computes the observation distribution that minimises the worst
//! per-target steady-state error bound (the fixed point of the modified
//! algebraic Riccati equation), either centrally or with a simulated network
//! of estimators, and then turns that distribution into concrete schedules
//! which can be evaluated under Kalman filtering.
//!
//! Module map:
//!
//! - [`model`]: target dynamics, validation and delay-chain expansion.
//! - [`mare`]: the Riccati operator, its fixed point and critical probability.
//! - [`optimizer`]: nested bisection for the optimal distribution.
//! - [`distributed`]: consensus-based version of the outer bisection.
//! - [`schedule`]: random, minimal-consecutiveness and CSMA-backoff schedules.
//! - [`simulate`]: covariance propagation, Monte Carlo and a sliding-window baseline.
//! - [`cli`]: scenario configuration and the command implementations.

pub mod cli;
pub mod distributed;
pub mod error;
pub mod linalg;
pub mod mare;
pub mod model;
pub mod optimizer;
pub mod schedule;
pub mod simulate;

pub use error::{Error, Result};
pub use linalg::CovMatrix;
pub use model::{DelayChainSpec, LtiTarget, ScheduleDistribution};
