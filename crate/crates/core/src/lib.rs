//! Monte-Carlo calibration and optimal control of stochastic differential
//! equations.
//!
//! The crate follows a discretize-then-optimize route. An SDE
//! `dX = a(X, u, t) dt + b(X, u, t) dB` is integrated with the Euler-Maruyama
//! scheme over an ensemble of `M` realizations driven by pre-sampled Brownian
//! increments. Costs depend on ensemble statistics (mean, variance, normalized
//! correlation). The exact gradient of the discrete cost is obtained from a
//! backward adjoint recursion on the same increments. A projected stochastic
//! gradient method with step rule `s0 / l` drives the control.
//!
//! Layout:
//!
//! * [`brownian`]: counter-based, order-independent increment sampling.
//! * [`sde`]: time grid, model trait, controls, ensemble forward solves and
//!   statistics.
//! * [`cost`]: discrete cost functionals and their per-sample state gradients.
//! * [`adjoint`]: backward recursion and reduced-gradient assembly.
//! * [`optimize`]: box projection, step rule and the stochastic gradient loop.
//! * [`models`]: Ornstein-Uhlenbeck and Stochastic Prandtl-Tomlinson models.
//! * [`verify`]: finite-difference gradient checks and the time-step
//!   convergence study.
//! * [`config`] / [`runner`]: file-driven runs behind the `sdeopt` binary.

pub mod adjoint;
pub mod brownian;
pub mod config;
pub mod cost;
mod error;
pub mod io;
pub mod models;
pub mod optimize;
pub mod reduce;
pub mod runner;
pub mod sde;
pub mod verify;

pub use error::{Error, Result};
