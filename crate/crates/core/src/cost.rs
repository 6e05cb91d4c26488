//! Discrete cost functionals and the per-sample state gradients that source
//! the adjoint recursion.
//!
//! Running terms use a left-endpoint sum over `nu = 0..N-1` with weight `dt`,
//! plus a terminal term at `nu = N`. Source conventions: the value returned
//! for `(nu, mu)` is `M / dt` times the partial derivative of the running part
//! with respect to `X[nu][mu]` (and `M` times the terminal partial at `N`),
//! so the adjoint adds `dt * source` and never sees the `1/M` ensemble
//! weight.

use std::path::Path;

use rayon::prelude::*;

use crate::models::ou::OuTargets;
use crate::sde::{Control, EnsemblePath, EnsembleStats, TimeGrid};
use crate::{Error, Result};

/// Target values `c_nu` at every grid node and a terminal target.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredData {
    width: usize,
    values: Vec<f64>,
    terminal: Vec<f64>,
}

impl DesiredData {
    /// `values` holds `(N+1) x width` entries, node-major.
    pub fn new(steps: usize, width: usize, values: Vec<f64>, terminal: Vec<f64>) -> Result<Self> {
        if width == 0 || values.len() != (steps + 1) * width || terminal.len() != width {
            return Err(Error::validation(format!(
                "target table must have {} node values and {width} terminal values",
                (steps + 1) * width
            )));
        }
        if values.iter().chain(&terminal).any(|v| !v.is_finite()) {
            return Err(Error::validation("target values must be finite"));
        }
        Ok(Self { width, values, terminal })
    }

    /// Samples `f(t_nu)` at each node; the terminal target is `f(T)`.
    pub fn from_fn<F: Fn(f64) -> Vec<f64>>(grid: &TimeGrid, width: usize, f: F) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().flat_map(&f).collect();
        let terminal = f(grid.horizon());
        Self::new(grid.steps(), width, values, terminal)
    }

    /// Mean/variance targets `(eta, sigma)` of an OU problem.
    pub fn from_ou_targets(grid: &TimeGrid, targets: &dyn OuTargets) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().flat_map(|t| [targets.eta(t), targets.sigma(t)]).collect();
        let terminal = vec![
            targets.eta_terminal(grid.horizon()),
            targets.sigma_terminal(grid.horizon()),
        ];
        Self::new(grid.steps(), 2, values, terminal)
    }

    /// Linear interpolation of a sampled table onto the grid nodes. `times`
    /// must be strictly increasing and cover `[0, T]`.
    pub fn from_table(grid: &TimeGrid, times: &[f64], columns: &[Vec<f64>]) -> Result<Self> {
        if times.len() < 2 || columns.is_empty() || columns.iter().any(|c| c.len() != times.len()) {
            return Err(Error::validation("target table needs at least two rows and consistent columns"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("target times must be strictly increasing"));
        }
        let tol = 1e-9 * grid.horizon();
        let interp = |t: f64| -> Result<Vec<f64>> {
            if t < times[0] - tol || t > times[times.len() - 1] + tol {
                return Err(Error::MissingTarget { t });
            }
            let k = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
            let (t0, t1) = (times[k - 1], times[k]);
            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            Ok(columns.iter().map(|c| c[k - 1] + w * (c[k] - c[k - 1])).collect())
        };
        let mut values = Vec::with_capacity((grid.steps() + 1) * columns.len());
        for t in grid.nodes() {
            values.extend(interp(t)?);
        }
        let terminal = interp(grid.horizon())?;
        Self::new(grid.steps(), columns.len(), values, terminal)
    }

    /// Reads `t, value` or `t, eta, sigma` columns (header row required).
    pub fn from_csv(path: impl AsRef<Path>, grid: &TimeGrid) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let width = reader.headers()?.len();
        if !(width == 2 || width == 3) {
            return Err(Error::validation(format!(
                "target CSV must have 2 or 3 columns (t, value | t, eta, sigma), found {width}"
            )));
        }
        let mut times = Vec::new();
        let mut columns = vec![Vec::new(); width - 1];
        for record in reader.records() {
            let record = record?;
            let parse = |k: usize| -> Result<f64> {
                record[k]
                    .parse::<f64>()
                    .map_err(|e| Error::validation(format!("bad number {:?}: {e}", &record[k])))
            };
            times.push(parse(0)?);
            for (k, col) in columns.iter_mut().enumerate() {
                col.push(parse(k + 1)?);
            }
        }
        Self::from_table(grid, &times, &columns)
    }

    /// Number of target channels `l`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.width - 1
    }

    pub fn at(&self, nu: usize) -> &[f64] {
        &self.values[nu * self.width..(nu + 1) * self.width]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    fn check(&self, path: &EnsemblePath, width: usize) -> Result<()> {
        if self.width != width {
            return Err(Error::validation(format!("cost expects {width} target channels, data has {}", self.width)));
        }
        if self.steps() != path.steps() {
            return Err(Error::validation(format!(
                "targets cover {} intervals, path has {}",
                self.steps(),
                path.steps()
            )));
        }
        Ok(())
    }
}

/// Per-sample adjoint sources, laid out like an [`EnsemblePath`]: node
/// `nu < N` holds the running state gradient, node `N` the terminal one.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSources {
    data: Vec<f64>,
    steps: usize,
    realizations: usize,
    dim: usize,
}

impl StateSources {
    /// Evaluates `fill(nu, mu, out)` for every node and realization.
    pub fn from_fn<F>(path: &EnsemblePath, fill: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Sync,
    {
        let (steps, m, d) = (path.steps(), path.realizations(), path.dim());
        let row = (steps + 1) * d;
        let mut data = vec![0.0; m * row];
        data.par_chunks_mut(row).enumerate().for_each(|(mu, chunk)| {
            for nu in 0..=steps {
                fill(nu, mu, &mut chunk[nu * d..(nu + 1) * d]);
            }
        });
        Self {
            data,
            steps,
            realizations: m,
            dim: d,
        }
    }

    pub fn zeros_like(path: &EnsemblePath) -> Self {
        Self::from_fn(path, |_, _, out| out.fill(0.0))
    }

    pub fn get(&self, nu: usize, mu: usize) -> &[f64] {
        let start = (mu * (self.steps + 1) + nu) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A discrete cost `J(X, u) = j(X) + kappa/2 ||u||^2`.
pub trait Cost: Sync {
    fn kappa(&self) -> f64;

    /// The state-dependent part `j(X)`.
    fn state_value(&self, path: &EnsemblePath) -> Result<f64>;

    /// Adjoint sources for every `(nu, mu)`.
    fn sources(&self, path: &EnsemblePath) -> Result<StateSources>;

    /// Number of target channels the cost expects.
    fn width(&self) -> usize;
}

/// `j(X) + kappa/2 ||u||^2` in the control's inner product.
pub fn cost_value<C: Control>(cost: &dyn Cost, path: &EnsemblePath, control: &C) -> Result<f64> {
    Ok(cost.state_value(path)? + 0.5 * cost.kappa() * control.norm_sq(path.grid().dt()))
}

/// Gradient of the regularization term in the control's inner product.
pub fn reg_grad<C: Control>(kappa: f64, control: &C) -> Vec<f64> {
    control.values().iter().map(|v| kappa * v).collect()
}

/// Observation map `C: R^d -> R^l` applied to the ensemble mean.
pub trait Observable: Sync {
    fn out_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// `l x d`, row-major.
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl Observable for Identity {
    fn out_dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = 1.0;
        }
    }
}

/// Observable built from a pair of closures.
pub struct FnObservable<F, J> {
    pub out_dim: usize,
    pub f: F,
    pub jac: J,
}

impl<F, J> Observable for FnObservable<F, J>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
    J: Fn(&[f64], &mut [f64]) + Sync,
{
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.jac)(x, out)
    }
}

/// Mean tracking `dt/2 sum ||C(E_nu) - c_nu||^2 + 1/2 ||C(E_N) - c_N||^2`.
pub struct TrackingCost<O> {
    pub observable: O,
    pub data: DesiredData,
    pub kappa: f64,
}

impl<O: Observable> TrackingCost<O> {
    fn residual(&self, mean: &[f64], target: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.observable.out_dim()];
        self.observable.eval(mean, &mut c);
        c.iter().zip(target).map(|(a, b)| a - b).collect()
    }

    fn pulled_back(&self, mean: &[f64], target: &[f64]) -> Vec<f64> {
        let l = self.observable.out_dim();
        let d = mean.len();
        let res = self.residual(mean, target);
        let mut jac = vec![0.0; l * d];
        self.observable.jacobian(mean, &mut jac);
        (0..d).map(|k| (0..l).map(|i| jac[i * d + k] * res[i]).sum()).collect()
    }

    /// `C'(E_nu)^T (C(E_nu) - c_nu)`; identical for every realization.
    pub fn state_grad(&self, path: &EnsemblePath, nu: usize) -> Result<Vec<f64>> {
        let mean = crate::sde::ensemble_mean(path, nu)?;
        Ok(self.pulled_back(&mean, self.data.at(nu)))
    }

    pub fn terminal_grad(&self, path: &EnsemblePath) -> Result<Vec<f64>> {
        let mean = crate::sde::ensemble_mean(path, path.steps())?;
        Ok(self.pulled_back(&mean, self.data.terminal()))
    }
}

impl<O: Observable> Cost for TrackingCost<O> {
    fn kappa(&self) -> f64 {
        self.kappa
    }

    fn width(&self) -> usize {
        self.observable.out_dim()
    }

    fn state_value(&self, path: &EnsemblePath) -> Result<f64> {
        self.data.check(path, self.observable.out_dim())?;
        let n = path.steps();
        let dt = path.grid().dt();
        let sq = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        let mut running = 0.0;
        for nu in 0..n {
            running += sq(self.residual(&crate::sde::ensemble_mean(path, nu)?, self.data.at(nu)));
        }
        let terminal = sq(self.residual(&crate::sde::ensemble_mean(path, n)?, self.data.terminal()));
        Ok(0.5 * dt * running + 0.5 * terminal)
    }

    fn sources(&self, path: &EnsemblePath) -> Result<StateSources> {
        self.data.check(path, self.observable.out_dim())?;
        let n = path.steps();
        let mut per_node = Vec::with_capacity(n + 1);
        for nu in 0..n {
            per_node.push(self.state_grad(path, nu)?);
        }
        per_node.push(self.terminal_grad(path)?);
        Ok(StateSources::from_fn(path, |nu, _mu, out| out.copy_from_slice(&per_node[nu])))
    }
}

/// Mean and variance tracking for a scalar state; targets `(eta, sigma)`.
#[derive(Debug, Clone)]
pub struct OuCost {
    pub data: DesiredData,
    pub kappa: f64,
}

impl OuCost {
    fn stats(&self, path: &EnsemblePath) -> Result<EnsembleStats> {
        if path.dim() != 1 {
            return Err(Error::validation(format!("mean/variance cost needs d = 1, got {}", path.dim())));
        }
        self.data.check(path, 2)?;
        EnsembleStats::compute(path, false)
    }

    fn source_from(stats: &EnsembleStats, target: &[f64], nu: usize, x: f64) -> f64 {
        let (e, v) = (stats.mean_at(nu, 0), stats.variance_at(nu, 0));
        (e - target[0]) + 2.0 * (v - target[1]) * (x - e)
    }

    /// `(E_nu - eta_nu) + 2 (V_nu - sigma_nu)(X[nu][mu] - E_nu)`.
    pub fn state_grad(&self, path: &EnsemblePath, nu: usize, mu: usize) -> Result<f64> {
        let stats = self.stats(path)?;
        Ok(Self::source_from(&stats, self.data.at(nu), nu, path.value(nu, mu, 0)))
    }

    pub fn terminal_grad(&self, path: &EnsemblePath, mu: usize) -> Result<f64> {
        let stats = self.stats(path)?;
        let n = path.steps();
        Ok(Self::source_from(&stats, self.data.terminal(), n, path.value(n, mu, 0)))
    }
}

impl Cost for OuCost {
    fn kappa(&self) -> f64 {
        self.kappa
    }

    fn width(&self) -> usize {
        2
    }

    fn state_value(&self, path: &EnsemblePath) -> Result<f64> {
        let stats = self.stats(path)?;
        let n = path.steps();
        let term = |nu: usize, target: &[f64]| {
            (stats.mean_at(nu, 0) - target[0]).powi(2) + (stats.variance_at(nu, 0) - target[1]).powi(2)
        };
        let running: f64 = (0..n).map(|nu| term(nu, self.data.at(nu))).sum();
        Ok(0.5 * path.grid().dt() * running + 0.5 * term(n, self.data.terminal()))
    }

    fn sources(&self, path: &EnsemblePath) -> Result<StateSources> {
        let stats = self.stats(path)?;
        let n = path.steps();
        Ok(StateSources::from_fn(path, |nu, mu, out| {
            let target = if nu == n { self.data.terminal() } else { self.data.at(nu) };
            out[0] = Self::source_from(&stats, target, nu, path.value(nu, mu, 0));
        }))
    }
}

/// Tracking of the normalized tracer correlation `C_nu`, without a
/// regularization term.
#[derive(Debug, Clone)]
pub struct CorrCost {
    pub data: DesiredData,
}

impl CorrCost {
    fn stats(&self, path: &EnsemblePath) -> Result<EnsembleStats> {
        self.data.check(path, 1)?;
        EnsembleStats::compute(path, true)
    }

    fn source_from(&self, stats: &EnsembleStats, path: &EnsemblePath, nu: usize, mu: usize) -> f64 {
        if nu == 0 {
            return 0.0;
        }
        let corr = stats.correlation.as_ref().expect("correlation computed")[nu];
        let target = if nu == path.steps() { self.data.terminal()[0] } else { self.data.at(nu)[0] };
        let y0 = path.value(0, mu, 0) - stats.mean_at(0, 0);
        let y = path.value(nu, mu, 0) - stats.mean_at(nu, 0);
        (corr - target) * (y0 - 2.0 * corr * y) / stats.variance_at(nu, 0)
    }

    /// Tracer component `(C_nu - c_nu)(Y0 - 2 C_nu Y_nu) / E[Y_nu^2]`, other
    /// components zero; zero at `nu = 0`.
    pub fn state_grad(&self, path: &EnsemblePath, nu: usize, mu: usize) -> Result<Vec<f64>> {
        let stats = self.stats(path)?;
        let mut out = vec![0.0; path.dim()];
        out[0] = self.source_from(&stats, path, nu, mu);
        Ok(out)
    }
}

impl Cost for CorrCost {
    fn kappa(&self) -> f64 {
        0.0
    }

    fn width(&self) -> usize {
        1
    }

    fn state_value(&self, path: &EnsemblePath) -> Result<f64> {
        let stats = self.stats(path)?;
        let corr = stats.correlation.as_ref().expect("correlation computed");
        let n = path.steps();
        let running: f64 = (0..n).map(|nu| (corr[nu] - self.data.at(nu)[0]).powi(2)).sum();
        Ok(0.5 * path.grid().dt() * running + 0.5 * (corr[n] - self.data.terminal()[0]).powi(2))
    }

    fn sources(&self, path: &EnsemblePath) -> Result<StateSources> {
        let stats = self.stats(path)?;
        Ok(StateSources::from_fn(path, |nu, mu, out| {
            out.fill(0.0);
            out[0] = self.source_from(&stats, path, nu, mu);
        }))
    }
}
