//! Ornstein-Uhlenbeck process `dX = theta (u1 - X) dt + u2 dB` with
//! time-dependent controls `(u1, u2)`, its closed-form moments and the
//! controls that track prescribed mean and variance curves exactly.

use std::f64::consts::PI;

use crate::brownian::NormalStream;
use crate::sde::{Control, ControlGrid, Dims, Model, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    /// Mean-reversion rate.
    pub theta: f64,
}

/// `a = theta (u1 - x)`, `b = u2`; `d = m = 1`, `r = 2`.
#[derive(Debug, Clone, Copy)]
pub struct OuModel {
    theta: f64,
}

impl OuModel {
    pub fn new(params: OuParams) -> Result<Self> {
        if !(params.theta > 0.0 && params.theta.is_finite()) {
            return Err(Error::validation(format!("theta must be positive, got {}", params.theta)));
        }
        Ok(Self { theta: params.theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl Model for OuModel {
    fn dims(&self) -> Dims {
        Dims {
            state: 1,
            noise: 1,
            control: 2,
        }
    }

    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.theta * (u[0] - x[0]);
    }

    fn diffusion(&self, _x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = u[1];
    }

    fn jac_ax(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -self.theta;
    }

    fn jac_au(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.theta;
        out[1] = 0.0;
    }

    fn jac_bx(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn jac_bu(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 1.0;
    }
}

/// Desired mean `eta(t)` and variance `sigma(t)` curves.
pub trait OuTargets: Sync {
    fn eta(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;

    /// Terminal mean target, `eta(T)` unless overridden.
    fn eta_terminal(&self, horizon: f64) -> f64 {
        self.eta(horizon)
    }

    fn sigma_terminal(&self, horizon: f64) -> f64 {
        self.sigma(horizon)
    }

    fn eta_dot(&self, t: f64) -> f64 {
        let h = 1e-6 * (1.0 + t.abs());
        (self.eta(t + h) - self.eta(t - h)) / (2.0 * h)
    }

    fn sigma_dot(&self, t: f64) -> f64 {
        let h = 1e-6 * (1.0 + t.abs());
        (self.sigma(t + h) - self.sigma(t - h)) / (2.0 * h)
    }
}

/// `eta(t) = sin(2 pi t / T) - 1`, `sigma(t) = 0.2 (cos(2 pi t / T) + 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceTargets {
    pub horizon: f64,
}

impl OuTargets for ReferenceTargets {
    fn eta(&self, t: f64) -> f64 {
        (2.0 * PI * t / self.horizon).sin() - 1.0
    }

    fn sigma(&self, t: f64) -> f64 {
        0.2 * ((2.0 * PI * t / self.horizon).cos() + 2.0)
    }

    fn eta_dot(&self, t: f64) -> f64 {
        let w = 2.0 * PI / self.horizon;
        w * (w * t).cos()
    }

    fn sigma_dot(&self, t: f64) -> f64 {
        let w = 2.0 * PI / self.horizon;
        -0.2 * w * (w * t).sin()
    }
}

/// Which closed form to use for the squared diffusion control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceFormula {
    /// `(u2*)^2 = sigma' + 2 theta sigma`, from differentiating the variance.
    VarianceOde,
    /// `(u2*)^2 = 2 theta sigma + sqrt(sigma) (sqrt(sigma))'`.
    Displayed,
}

/// Controls `(u1*, u2*)` at time `t` that reproduce the targets exactly.
pub fn ou_perfect_controls(
    theta: f64,
    targets: &dyn OuTargets,
    t: f64,
    formula: VarianceFormula,
) -> Result<(f64, f64)> {
    let u1 = targets.eta_dot(t) / theta + targets.eta(t);
    let sigma = targets.sigma(t);
    let sigma_dot = targets.sigma_dot(t);
    let u2_sq = match formula {
        VarianceFormula::VarianceOde => sigma_dot + 2.0 * theta * sigma,
        // sqrt(s) * (sqrt(s))' = s' / 2
        VarianceFormula::Displayed => 2.0 * theta * sigma + 0.5 * sigma_dot,
    };
    if u2_sq < 0.0 {
        return Err(Error::InfeasibleVarianceTarget { t, value: u2_sq });
    }
    Ok((u1, u2_sq.sqrt()))
}

/// Perfect controls sampled at the left node of every interval.
pub fn ou_perfect_control_grid(
    theta: f64,
    targets: &dyn OuTargets,
    grid: &TimeGrid,
    formula: VarianceFormula,
) -> Result<ControlGrid> {
    let mut values = Vec::with_capacity(2 * grid.steps());
    for nu in 0..grid.steps() {
        let (u1, u2) = ou_perfect_controls(theta, targets, grid.node(nu), formula)?;
        values.extend([u1, u2]);
    }
    ControlGrid::unbounded(2, grid.steps(), values)
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Mean and variance at `t` for controls `controls(s) = (u1(s), u2(s))`.
///
/// The moment integrals are evaluated with composite Simpson on `intervals`
/// subintervals.
pub fn ou_exact_moments<F>(theta: f64, controls: F, mean0: f64, var0: f64, t: f64, intervals: usize) -> (f64, f64)
where
    F: Fn(f64) -> (f64, f64),
{
    if t == 0.0 {
        return (mean0, var0);
    }
    let mean_int = simpson(|s| controls(s).0 * (-theta * (t - s)).exp(), 0.0, t, intervals);
    let var_int = simpson(|s| controls(s).1.powi(2) * (-2.0 * theta * (t - s)).exp(), 0.0, t, intervals);
    (
        (-theta * t).exp() * mean0 + theta * mean_int,
        (-2.0 * theta * t).exp() * var0 + var_int,
    )
}

/// Moments at every node of `grid` for analytic controls, integrating each
/// interval with `refine` Simpson subintervals.
pub fn ou_moment_path<F>(theta: f64, controls: F, mean0: f64, var0: f64, grid: &TimeGrid, refine: usize) -> Vec<(f64, f64)>
where
    F: Fn(f64) -> (f64, f64),
{
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let (mut mean, mut var) = (mean0, var0);
    out.push((mean, var));
    for nu in 0..grid.steps() {
        let a = grid.node(nu);
        let b = a + dt;
        let mean_int = simpson(|s| controls(s).0 * (-theta * (b - s)).exp(), a, b, refine);
        let var_int = simpson(|s| controls(s).1.powi(2) * (-2.0 * theta * (b - s)).exp(), a, b, refine);
        mean = (-theta * dt).exp() * mean + theta * mean_int;
        var = (-2.0 * theta * dt).exp() * var + var_int;
        out.push((mean, var));
    }
    out
}

/// Exact node moments of the continuous process under a piecewise-constant
/// control grid.
pub fn ou_moment_path_grid(theta: f64, controls: &ControlGrid, mean0: f64, var0: f64, grid: &TimeGrid) -> Vec<(f64, f64)> {
    let dt = grid.dt();
    let decay = (-theta * dt).exp();
    let decay2 = (-2.0 * theta * dt).exp();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let (mut mean, mut var) = (mean0, var0);
    out.push((mean, var));
    for nu in 0..grid.steps() {
        let u = controls.at(nu);
        mean = decay * mean + u[0] * (1.0 - decay);
        var = decay2 * var + u[1] * u[1] * (1.0 - decay2) / (2.0 * theta);
        out.push((mean, var));
    }
    out
}

/// Continuous cost `1/2 int (E - eta)^2 + 1/2 int (V - sigma)^2 + terminal
/// terms + kappa/2 int |u|^2` on `[0, horizon]`, by Simpson on `intervals`
/// subintervals with moments propagated across each subinterval.
pub fn ou_continuous_cost<F>(
    theta: f64,
    controls: F,
    mean0: f64,
    var0: f64,
    targets: &dyn OuTargets,
    horizon: f64,
    kappa: f64,
    intervals: usize,
) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let n = intervals.max(2).next_multiple_of(2);
    let fine = TimeGrid::new(horizon, n)?;
    let moments = ou_moment_path(theta, &controls, mean0, var0, &fine, 4);
    let h = fine.dt();
    let integrand = |k: usize| {
        let t = fine.node(k);
        let (e, v) = moments[k];
        let (u1, u2) = controls(t);
        0.5 * (e - targets.eta(t)).powi(2) + 0.5 * (v - targets.sigma(t)).powi(2) + 0.5 * kappa * (u1 * u1 + u2 * u2)
    };
    let mut acc = integrand(0) + integrand(n);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * integrand(k);
    }
    let (e_t, v_t) = moments[n];
    Ok(acc * h / 3.0
        + 0.5 * (e_t - targets.eta_terminal(horizon)).powi(2)
        + 0.5 * (v_t - targets.sigma_terminal(horizon)).powi(2))
}

/// Normal initial ensemble with the given mean and variance, typically
/// `eta(0)` and `sigma(0)`.
pub fn ou_initial_ensemble(mean: f64, variance: f64, realizations: usize, seed: u64) -> Vec<f64> {
    let stream = NormalStream::new(seed);
    let std = variance.max(0.0).sqrt();
    (0..realizations)
        .map(|mu| mean + std * stream.draw(mu as u64, 0, 0))
        .collect()
}
