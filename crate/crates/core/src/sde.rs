//! Time grid, model interface, controls, Euler-Maruyama ensemble integration
//! and ensemble statistics.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::brownian::IncrementTensor;
use crate::reduce;
use crate::{Error, Result};

/// Any state component whose magnitude exceeds this is treated as a blow-up.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Floor below which the tracer variance makes the normalized correlation
/// undefined.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Magic bytes opening a binary path dump.
pub const PATH_MAGIC: &[u8; 8] = b"SDEPATH1";

/// Uniform grid `t_nu = nu * dt` on `[0, T]` with `N` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::validation(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::validation("time grid needs at least one interval"));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node(&self, nu: usize) -> f64 {
        nu as f64 * self.dt
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|nu| self.node(nu))
    }
}

/// State, noise and control dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension `d`.
    pub state: usize,
    /// Noise dimension `m`.
    pub noise: usize,
    /// Control or parameter dimension `r`.
    pub control: usize,
}

/// Coefficients of `dX = a(X, u, t) dt + b(X, u, t) dB` and their Jacobians.
///
/// All matrices are written row-major into caller-provided buffers:
///
/// * `diffusion`: `d x m`, `out[i * m + j] = b_ij`;
/// * `jac_ax`: `d x d`, `out[i * d + k] = da_i / dx_k`;
/// * `jac_au`: `d x r`, `out[i * r + k] = da_i / du_k`;
/// * `jac_bx`: `m` blocks of `d x d`, `out[(j * d + i) * d + k] = db_ij / dx_k`;
/// * `jac_bu`: `m` blocks of `d x r`, `out[(j * d + i) * r + k] = db_ij / du_k`.
///
/// The default diffusion Jacobians are zero, which is only correct when
/// [`Model::diffusion_constant`] holds.
pub trait Model: Sync {
    fn dims(&self) -> Dims;

    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    fn diffusion(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    fn jac_ax(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    fn jac_au(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    fn jac_bx(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn jac_bu(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    /// `b` depends on neither `x` nor `u`.
    fn diffusion_constant(&self) -> bool {
        false
    }
}

impl<T: Model + ?Sized> Model for &T {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).drift(x, u, t, out)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).diffusion(x, u, t, out)
    }
    fn jac_ax(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).jac_ax(x, u, t, out)
    }
    fn jac_au(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).jac_au(x, u, t, out)
    }
    fn jac_bx(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).jac_bx(x, u, t, out)
    }
    fn jac_bu(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).jac_bu(x, u, t, out)
    }
    fn diffusion_constant(&self) -> bool {
        (**self).diffusion_constant()
    }
}

/// A decision variable: either a time-independent parameter vector or a
/// piecewise-constant control on the time grid.
///
/// The flat [`values`](Control::values) vector is the optimization variable.
/// Gradients share its layout and are Riesz representatives in the inner
/// product `<a, b> = weight(dt) * sum_k a_k b_k`.
pub trait Control: Clone + Send + Sync {
    /// Control dimension `r` seen by the model at every step.
    fn dim(&self) -> usize;

    /// Control value applied on step `nu`.
    fn at(&self, nu: usize) -> &[f64];

    /// Index of the first flat entry of [`at(nu)`](Control::at).
    fn offset(&self, nu: usize) -> usize;

    fn values(&self) -> &[f64];

    fn values_mut(&mut self) -> &mut [f64];

    /// Box bounds of flat entry `k`.
    fn bounds(&self, k: usize) -> (f64, f64);

    /// Inner-product weight: 1 for parameters, `dt` for grid controls.
    fn weight(&self, dt: f64) -> f64;

    /// Fails unless the control can drive a grid with `steps` intervals.
    fn check_steps(&self, steps: usize) -> Result<()>;

    fn norm_sq(&self, dt: f64) -> f64 {
        self.weight(dt) * self.values().iter().map(|v| v * v).sum::<f64>()
    }

    /// Componentwise projection onto the box.
    fn project(&mut self) {
        let n = self.values().len();
        for k in 0..n {
            let (lo, hi) = self.bounds(k);
            let v = &mut self.values_mut()[k];
            *v = v.clamp(lo, hi);
        }
    }

    fn within_bounds(&self) -> bool {
        self.values().iter().enumerate().all(|(k, v)| {
            let (lo, hi) = self.bounds(k);
            lo <= *v && *v <= hi
        })
    }
}

fn check_box(lower: &[f64], upper: &[f64], dim: usize) -> Result<()> {
    if lower.len() != dim || upper.len() != dim {
        return Err(Error::validation(format!(
            "bounds must have {dim} entries, got {} and {}",
            lower.len(),
            upper.len()
        )));
    }
    if let Some(k) = (0..dim).find(|&k| lower[k].is_nan() || upper[k].is_nan() || lower[k] > upper[k]) {
        return Err(Error::validation(format!(
            "empty box in component {k}: [{}, {}]",
            lower[k], upper[k]
        )));
    }
    Ok(())
}

/// Time-independent parameter vector with box bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParam {
    u: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlParam {
    pub fn new(u: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_box(&lower, &upper, u.len())?;
        let p = Self { u, lower, upper };
        if !p.within_bounds() {
            return Err(Error::validation(format!("parameter {:?} violates its bounds", p.u)));
        }
        Ok(p)
    }

    pub fn unbounded(u: Vec<f64>) -> Self {
        let r = u.len();
        Self {
            u,
            lower: vec![f64::NEG_INFINITY; r],
            upper: vec![f64::INFINITY; r],
        }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

impl Control for ControlParam {
    fn dim(&self) -> usize {
        self.u.len()
    }

    fn offset(&self, _nu: usize) -> usize {
        0
    }

    fn at(&self, _nu: usize) -> &[f64] {
        &self.u
    }

    fn values(&self) -> &[f64] {
        &self.u
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    fn bounds(&self, k: usize) -> (f64, f64) {
        (self.lower[k], self.upper[k])
    }

    fn weight(&self, _dt: f64) -> f64 {
        1.0
    }

    fn check_steps(&self, _steps: usize) -> Result<()> {
        Ok(())
    }
}

/// Piecewise-constant control `U = [u_0 | ... | u_{N-1}]`, column `nu` acting
/// on `[t_nu, t_{nu+1})`. Columns are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    values: Vec<f64>,
    dim: usize,
    steps: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlGrid {
    /// `values[nu * r + i]` is `U_{i, nu}`.
    pub fn new(dim: usize, steps: usize, values: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if dim == 0 || steps == 0 {
            return Err(Error::validation("control grid needs r >= 1 and N >= 1"));
        }
        if values.len() != dim * steps {
            return Err(Error::validation(format!(
                "control grid expects {} values, got {}",
                dim * steps,
                values.len()
            )));
        }
        check_box(&lower, &upper, dim)?;
        let g = Self {
            values,
            dim,
            steps,
            lower,
            upper,
        };
        if !g.within_bounds() {
            return Err(Error::validation("control grid violates its bounds"));
        }
        Ok(g)
    }

    pub fn constant(u: &[f64], steps: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let values = (0..steps).flat_map(|_| u.iter().copied()).collect();
        Self::new(u.len(), steps, values, lower, upper)
    }

    /// Samples `f(t_nu)` into column `nu`.
    pub fn from_fn<F>(grid: &TimeGrid, dim: usize, lower: Vec<f64>, upper: Vec<f64>, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let mut values = Vec::with_capacity(dim * grid.steps());
        for nu in 0..grid.steps() {
            let col = f(grid.node(nu));
            if col.len() != dim {
                return Err(Error::validation("control function returned wrong dimension"));
            }
            values.extend(col);
        }
        Self::new(dim, grid.steps(), values, lower, upper)
    }

    pub fn unbounded(dim: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(dim, steps, values, vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim])
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, i: usize, nu: usize) -> f64 {
        self.values[nu * self.dim + i]
    }

    /// Row `i` over all steps.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.steps).map(|nu| self.get(i, nu)).collect()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// `sqrt(dt) * ||U||_F`.
    pub fn weighted_norm(&self, dt: f64) -> f64 {
        self.norm_sq(dt).sqrt()
    }
}

impl Control for ControlGrid {
    fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, nu: usize) -> usize {
        nu * self.dim
    }

    fn at(&self, nu: usize) -> &[f64] {
        &self.values[nu * self.dim..(nu + 1) * self.dim]
    }

    fn values(&self) -> &[f64] {
        &self.values
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn bounds(&self, k: usize) -> (f64, f64) {
        let i = k % self.dim;
        (self.lower[i], self.upper[i])
    }

    fn weight(&self, dt: f64) -> f64 {
        dt
    }

    fn check_steps(&self, steps: usize) -> Result<()> {
        if steps != self.steps {
            return Err(Error::validation(format!(
                "control grid has {} columns but the time grid has {steps} intervals",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Discrete ensemble state `X[nu][mu]` in `R^d` for `nu = 0..=N`.
///
/// Stored realization-major so each trajectory is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    data: Vec<f64>,
    grid: TimeGrid,
    realizations: usize,
    dim: usize,
}

impl EnsemblePath {
    /// Builds a path from values given in `[nu][mu][i]` order.
    pub fn from_nodes(grid: TimeGrid, realizations: usize, dim: usize, values: &[f64]) -> Result<Self> {
        let nodes = grid.steps() + 1;
        if realizations == 0 || dim == 0 || values.len() != nodes * realizations * dim {
            return Err(Error::validation(format!(
                "path expects {} values for (N+1, M, d) = ({nodes}, {realizations}, {dim})",
                nodes * realizations * dim
            )));
        }
        let mut data = vec![0.0; values.len()];
        for nu in 0..nodes {
            for mu in 0..realizations {
                for i in 0..dim {
                    data[(mu * nodes + nu) * dim + i] = values[(nu * realizations + mu) * dim + i];
                }
            }
        }
        Ok(Self {
            data,
            grid,
            realizations,
            dim,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of realizations `M`.
    pub fn realizations(&self) -> usize {
        self.realizations
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// State of realization `mu` at node `nu`.
    pub fn state(&self, nu: usize, mu: usize) -> &[f64] {
        let start = (mu * (self.steps() + 1) + nu) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn value(&self, nu: usize, mu: usize, i: usize) -> f64 {
        self.data[(mu * (self.steps() + 1) + nu) * self.dim + i]
    }

    pub fn set(&mut self, nu: usize, mu: usize, i: usize, v: f64) {
        let idx = (mu * (self.steps() + 1) + nu) * self.dim + i;
        self.data[idx] = v;
    }

    /// Whole trajectory of realization `mu`, node-major.
    pub fn realization(&self, mu: usize) -> &[f64] {
        let len = (self.steps() + 1) * self.dim;
        &self.data[mu * len..(mu + 1) * len]
    }

    /// The realizations in `range` as a path of their own.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.realizations {
            return Err(Error::validation(format!(
                "realization range {range:?} is empty or exceeds M = {}",
                self.realizations
            )));
        }
        let len = (self.steps() + 1) * self.dim;
        Ok(Self {
            data: self.data[range.start * len..range.end * len].to_vec(),
            grid: self.grid,
            realizations: range.len(),
            dim: self.dim,
        })
    }

    /// States at the final node, `M x d`.
    pub fn terminal(&self) -> Vec<f64> {
        let n = self.steps();
        (0..self.realizations).flat_map(|mu| self.state(n, mu).to_vec()).collect()
    }

    fn check_node(&self, nu: usize) -> Result<()> {
        if nu > self.steps() {
            return Err(Error::IndexOutOfRange {
                index: nu,
                len: self.steps() + 1,
            });
        }
        Ok(())
    }

    /// Writes a 40-byte header (magic, M, N, d, dt) followed by the
    /// little-endian states in `[mu][nu][i]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PATH_MAGIC)?;
        for dim in [self.realizations, self.steps(), self.dim] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&self.grid.dt().to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PATH_MAGIC {
            return Err(Error::validation("not a path dump (bad magic)"));
        }
        let mut word = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut word)?;
            *d = u64::from_le_bytes(word) as usize;
        }
        r.read_exact(&mut word)?;
        let dt = f64::from_le_bytes(word);
        let [realizations, steps, dim] = dims;
        let grid = TimeGrid::new(dt * steps as f64, steps)?;
        let len = realizations * (steps + 1) * dim;
        if len == 0 {
            return Err(Error::validation("empty path dump"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Self {
            data,
            grid,
            realizations,
            dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_binary(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn blown_up(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD)
}

/// Scratch buffers for one Euler-Maruyama step.
pub(crate) struct StepScratch {
    drift: Vec<f64>,
    diff: Vec<f64>,
}

impl StepScratch {
    pub(crate) fn new(dims: Dims) -> Self {
        Self {
            drift: vec![0.0; dims.state],
            diff: vec![0.0; dims.state * dims.noise],
        }
    }
}

/// `next = x + a(x, u, t) dt + b(x, u, t) db`.
pub(crate) fn em_step<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    db: &[f64],
    scratch: &mut StepScratch,
    next: &mut [f64],
) {
    let m = db.len();
    model.drift(x, u, t, &mut scratch.drift);
    model.diffusion(x, u, t, &mut scratch.diff);
    for i in 0..x.len() {
        let noise: f64 = (0..m).map(|j| scratch.diff[i * m + j] * db[j]).sum();
        next[i] = x[i] + scratch.drift[i] * dt + noise;
    }
}

/// Euler-Maruyama ensemble solve for any [`Control`].
///
/// `x0` holds the `M x d` initial ensemble; `inc` must match `(M, N, m)` and
/// the grid step.
pub fn em_forward<M, C>(model: &M, control: &C, x0: &[f64], inc: &IncrementTensor, grid: &TimeGrid) -> Result<EnsemblePath>
where
    M: Model + ?Sized,
    C: Control,
{
    let dims = model.dims();
    let (d, m) = (dims.state, dims.noise);
    let steps = grid.steps();
    let realizations = inc.realizations();
    if control.dim() != dims.control {
        return Err(Error::validation(format!(
            "model expects r = {}, control has {}",
            dims.control,
            control.dim()
        )));
    }
    control.check_steps(steps)?;
    if x0.len() != realizations * d {
        return Err(Error::validation(format!(
            "initial ensemble has {} values, expected M*d = {}",
            x0.len(),
            realizations * d
        )));
    }
    if inc.steps() != steps || inc.channels() != m {
        return Err(Error::validation(format!(
            "increments are {}x{}x{}, expected {realizations}x{steps}x{m}",
            inc.realizations(),
            inc.steps(),
            inc.channels()
        )));
    }
    if (inc.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::validation(format!(
            "increment step {} differs from grid step {}",
            inc.dt(),
            grid.dt()
        )));
    }
    let dt = grid.dt();
    let row_len = (steps + 1) * d;
    let mut data = vec![0.0; realizations * row_len];
    let failure = data
        .par_chunks_mut(row_len)
        .enumerate()
        .filter_map(|(mu, row)| {
            let mut scratch = StepScratch::new(dims);
            row[..d].copy_from_slice(&x0[mu * d..(mu + 1) * d]);
            if blown_up(&row[..d]) {
                return Some(mu * (steps + 1));
            }
            for nu in 0..steps {
                let (done, rest) = row.split_at_mut((nu + 1) * d);
                let x = &done[nu * d..];
                let next = &mut rest[..d];
                em_step(model, x, control.at(nu), grid.node(nu), dt, inc.step(mu, nu), &mut scratch, next);
                if blown_up(next) {
                    return Some(mu * (steps + 1) + nu + 1);
                }
            }
            None
        })
        .min();
    if let Some(code) = failure {
        return Err(Error::IntegrationBlowup {
            mu: code / (steps + 1),
            nu: code % (steps + 1),
        });
    }
    Ok(EnsemblePath {
        data,
        grid: *grid,
        realizations,
        dim: d,
    })
}

/// Forward solve with a time-independent parameter.
pub fn em_forward_param<M: Model + ?Sized>(
    model: &M,
    u: &ControlParam,
    x0: &[f64],
    inc: &IncrementTensor,
    grid: &TimeGrid,
) -> Result<EnsemblePath> {
    em_forward(model, u, x0, inc, grid)
}

/// Forward solve with a piecewise-constant control, column `nu` on step `nu`.
pub fn em_forward_grid<M: Model + ?Sized>(
    model: &M,
    controls: &ControlGrid,
    x0: &[f64],
    inc: &IncrementTensor,
    grid: &TimeGrid,
) -> Result<EnsemblePath> {
    em_forward(model, controls, x0, inc, grid)
}

/// `E^M[X_nu]`.
pub fn ensemble_mean(path: &EnsemblePath, nu: usize) -> Result<Vec<f64>> {
    path.check_node(nu)?;
    let m = path.realizations() as f64;
    Ok((0..path.dim())
        .map(|i| reduce::sum_by(path.realizations(), |mu| path.value(nu, mu, i)) / m)
        .collect())
}

fn mean_component(path: &EnsemblePath, nu: usize, i: usize) -> f64 {
    reduce::sum_by(path.realizations(), |mu| path.value(nu, mu, i)) / path.realizations() as f64
}

/// Biased ensemble variance `(1/M) sum_mu (X - E^M[X])^2` of one component.
pub fn ensemble_variance(path: &EnsemblePath, nu: usize, component: usize) -> Result<f64> {
    path.check_node(nu)?;
    if component >= path.dim() {
        return Err(Error::IndexOutOfRange {
            index: component,
            len: path.dim(),
        });
    }
    let mean = mean_component(path, nu, component);
    Ok(reduce::sum_by(path.realizations(), |mu| (path.value(nu, mu, component) - mean).powi(2))
        / path.realizations() as f64)
}

/// `E^M[Y_nu Y_0] / E^M[Y_nu^2]` for the centered first component `Y`.
pub fn normalized_correlation(path: &EnsemblePath, nu: usize) -> Result<f64> {
    path.check_node(nu)?;
    let mean0 = mean_component(path, 0, 0);
    let mean = mean_component(path, nu, 0);
    correlation_with_means(path, nu, mean0, mean)
}

fn correlation_with_means(path: &EnsemblePath, nu: usize, mean0: f64, mean: f64) -> Result<f64> {
    let m = path.realizations() as f64;
    let cross = reduce::sum_by(path.realizations(), |mu| {
        (path.value(nu, mu, 0) - mean) * (path.value(0, mu, 0) - mean0)
    }) / m;
    let second = reduce::sum_by(path.realizations(), |mu| (path.value(nu, mu, 0) - mean).powi(2)) / m;
    if !(second > VARIANCE_FLOOR) {
        return Err(Error::DegenerateVariance {
            nu,
            value: second,
            floor: VARIANCE_FLOOR,
        });
    }
    Ok(cross / second)
}

/// Per-node mean and variance of every component, plus the tracer
/// correlation on request.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    /// `(N+1) x d`, node-major.
    pub mean: Vec<f64>,
    /// `(N+1) x d`, node-major, biased.
    pub variance: Vec<f64>,
    pub correlation: Option<Vec<f64>>,
    pub dim: usize,
}

impl EnsembleStats {
    pub fn compute(path: &EnsemblePath, with_correlation: bool) -> Result<Self> {
        let d = path.dim();
        let nodes = path.steps() + 1;
        let m = path.realizations() as f64;
        let mut mean = vec![0.0; nodes * d];
        let mut variance = vec![0.0; nodes * d];
        for nu in 0..nodes {
            for i in 0..d {
                let e = mean_component(path, nu, i);
                mean[nu * d + i] = e;
                variance[nu * d + i] = reduce::sum_by(path.realizations(), |mu| (path.value(nu, mu, i) - e).powi(2)) / m;
            }
        }
        let correlation = if with_correlation {
            Some(
                (0..nodes)
                    .map(|nu| correlation_with_means(path, nu, mean[0], mean[nu * d]))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            mean,
            variance,
            correlation,
            dim: d,
        })
    }

    pub fn mean_at(&self, nu: usize, i: usize) -> f64 {
        self.mean[nu * self.dim + i]
    }

    pub fn variance_at(&self, nu: usize, i: usize) -> f64 {
        self.variance[nu * self.dim + i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::sample_increments;
    use crate::models::ou::{OuModel, OuParams};

    /// a = u (componentwise), b = 0, d = r = m = 1 by default.
    struct Constant {
        rate: f64,
    }

    impl Model for Constant {
        fn dims(&self) -> Dims {
            Dims { state: 1, noise: 1, control: 1 }
        }
        fn drift(&self, _x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = self.rate * u[0];
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn jac_ax(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn jac_au(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = self.rate;
        }
        fn diffusion_constant(&self) -> bool {
            true
        }
    }

    fn path_1d(values_by_node: &[&[f64]]) -> EnsemblePath {
        let steps = values_by_node.len() - 1;
        let m = values_by_node[0].len();
        let flat: Vec<f64> = values_by_node.iter().flat_map(|r| r.iter().copied()).collect();
        EnsemblePath::from_nodes(TimeGrid::new(steps as f64, steps).unwrap(), m, 1, &flat).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.dt(), 0.5);
        assert_eq!(g.nodes().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn zero_dynamics_keep_initial_state() {
        let model = Constant { rate: 0.0 };
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let inc = sample_increments(3, 3, 5, 1, grid.dt()).unwrap();
        let x0 = [1.0, -2.0, 0.5];
        let path = em_forward_param(&model, &ControlParam::unbounded(vec![1.0]), &x0, &inc, &grid).unwrap();
        for nu in 0..=5 {
            for mu in 0..3 {
                assert_eq!(path.value(nu, mu, 0), x0[mu]);
            }
        }
    }

    #[test]
    fn deterministic_unit_drift() {
        let model = Constant { rate: 1.0 };
        let grid = TimeGrid::new(2.0, 4).unwrap();
        let inc = IncrementTensor::from_data(1, 4, 1, 0.5, vec![0.3; 4]).unwrap();
        let path = em_forward_param(&model, &ControlParam::unbounded(vec![1.0]), &[0.0], &inc, &grid).unwrap();
        assert_eq!(path.value(4, 0, 0), 2.0);
    }

    #[test]
    fn grid_control_telescopes() {
        let model = Constant { rate: 1.0 };
        let grid = TimeGrid::new(3.0, 3).unwrap();
        let inc = IncrementTensor::from_data(1, 3, 1, 1.0, vec![0.0; 3]).unwrap();
        let u = ControlGrid::unbounded(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let path = em_forward_grid(&model, &u, &[0.0], &inc, &grid).unwrap();
        let xs: Vec<f64> = (0..=3).map(|nu| path.value(nu, 0, 0)).collect();
        assert_eq!(xs, vec![0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn ou_hand_recursion_param() {
        let model = OuModel::new(OuParams { theta: 1.0 }).unwrap();
        let grid = TimeGrid::new(0.2, 2).unwrap();
        let inc = IncrementTensor::from_data(1, 2, 1, 0.1, vec![0.1, -0.2]).unwrap();
        let path = em_forward_param(&model, &ControlParam::unbounded(vec![0.0, 1.0]), &[0.0], &inc, &grid).unwrap();
        assert!((path.value(1, 0, 0) - 0.1).abs() < 1e-15);
        assert!((path.value(2, 0, 0) - (-0.11)).abs() < 1e-15);
    }

    #[test]
    fn ou_hand_recursion_grid() {
        let model = OuModel::new(OuParams { theta: 1.0 }).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let inc = sample_increments(1, 1, 2, 1, 0.5).unwrap();
        let u = ControlGrid::unbounded(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let path = em_forward_grid(&model, &u, &[0.0], &inc, &grid).unwrap();
        assert_eq!(path.value(1, 0, 0), 0.5);
        assert_eq!(path.value(2, 0, 0), 0.75);
    }

    #[test]
    fn constant_grid_matches_param() {
        let model = OuModel::new(OuParams { theta: 0.7 }).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let inc = sample_increments(11, 5, 8, 1, grid.dt()).unwrap();
        let x0 = [0.1, 0.2, 0.3, 0.4, 0.5];
        let u = [0.3, 0.8];
        let a = em_forward_param(&model, &ControlParam::unbounded(u.to_vec()), &x0, &inc, &grid).unwrap();
        let b = em_forward_grid(&model, &ControlGrid::unbounded(2, 8, [u; 8].concat()).unwrap(), &x0, &inc, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let model = OuModel::new(OuParams { theta: 1.0 }).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let inc = sample_increments(1, 2, 4, 1, grid.dt()).unwrap();
        let u = ControlParam::unbounded(vec![0.0, 1.0]);
        assert!(em_forward_param(&model, &u, &[0.0], &inc, &grid).is_err());
        assert!(em_forward_param(&model, &ControlParam::unbounded(vec![0.0]), &[0.0, 0.0], &inc, &grid).is_err());
        let other = TimeGrid::new(2.0, 4).unwrap();
        assert!(em_forward_param(&model, &u, &[0.0, 0.0], &inc, &other).is_err());
        let short = ControlGrid::unbounded(2, 3, vec![0.0; 6]).unwrap();
        assert!(em_forward_grid(&model, &short, &[0.0, 0.0], &inc, &grid).is_err());
    }

    #[test]
    fn blowup_names_realization_and_step() {
        let model = Constant { rate: 1.0 };
        let grid = TimeGrid::new(3.0, 3).unwrap();
        let inc = IncrementTensor::from_data(2, 3, 1, 1.0, vec![0.0; 6]).unwrap();
        let u = ControlParam::unbounded(vec![1.0]);
        let err = em_forward_param(&model, &u, &[0.0, 1e12 - 1.5], &inc, &grid).unwrap_err();
        match err {
            Error::IntegrationBlowup { mu, nu } => assert_eq!((mu, nu), (1, 2)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mean_and_variance_by_hand() {
        let p = path_1d(&[&[1.0, 3.0, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 3.0, 3.0]]);
        assert_eq!(ensemble_mean(&p, 0).unwrap(), vec![1.0]);
        assert_eq!(ensemble_mean(&p, 1).unwrap(), vec![2.5]);
        assert_eq!(ensemble_variance(&p, 2, 0).unwrap(), 2.25);
        assert!(ensemble_mean(&p, 3).is_err());
        assert!(ensemble_variance(&p, 0, 1).is_err());

        let single = path_1d(&[&[4.0], &[5.0]]);
        assert_eq!(ensemble_mean(&single, 1).unwrap(), vec![5.0]);

        let two = path_1d(&[&[1.0, 3.0], &[0.0, 0.0]]);
        assert_eq!(ensemble_mean(&two, 0).unwrap(), vec![2.0]);
        assert_eq!(ensemble_variance(&two, 0, 0).unwrap(), 1.0);
        let flat = path_1d(&[&[7.0, 7.0, 7.0], &[0.0; 3]]);
        assert_eq!(ensemble_variance(&flat, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn correlation_by_hand() {
        let p = path_1d(&[&[1.0, -1.0], &[2.0, -2.0]]);
        assert_eq!(normalized_correlation(&p, 0).unwrap(), 1.0);
        assert_eq!(normalized_correlation(&p, 1).unwrap(), 0.5);
        let flat = path_1d(&[&[1.0, -1.0], &[3.0, 3.0]]);
        assert!(matches!(normalized_correlation(&flat, 1), Err(Error::DegenerateVariance { nu: 1, .. })));
    }

    #[test]
    fn correlation_of_independent_draws_vanishes() {
        let inc = sample_increments(77, 100_000, 2, 1, 1.0).unwrap();
        let m = 100_000;
        let mut values = vec![0.0; 2 * m];
        for mu in 0..m {
            values[mu] = inc.get(mu, 0, 0);
            values[m + mu] = inc.get(mu, 1, 0);
        }
        let p = EnsemblePath::from_nodes(TimeGrid::new(1.0, 1).unwrap(), m, 1, &values).unwrap();
        assert!(normalized_correlation(&p, 1).unwrap().abs() <= 0.02);
    }

    #[test]
    fn stats_agree_with_single_queries() {
        let model = OuModel::new(OuParams { theta: 1.0 }).unwrap();
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let inc = sample_increments(2, 50, 6, 1, grid.dt()).unwrap();
        let x0: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let path = em_forward_param(&model, &ControlParam::unbounded(vec![0.5, 1.0]), &x0, &inc, &grid).unwrap();
        let stats = EnsembleStats::compute(&path, true).unwrap();
        for nu in 0..=6 {
            assert_eq!(stats.mean_at(nu, 0), ensemble_mean(&path, nu).unwrap()[0]);
            assert_eq!(stats.variance_at(nu, 0), ensemble_variance(&path, nu, 0).unwrap());
            assert_eq!(stats.correlation.as_ref().unwrap()[nu], normalized_correlation(&path, nu).unwrap());
        }
        assert_eq!(stats.correlation.unwrap()[0], 1.0);
    }

    #[test]
    fn superposition_for_affine_ou() {
        // With u1 = 0 the OU recursion is linear in (x0, dB).
        let model = OuModel::new(OuParams { theta: 1.3 }).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let u = ControlParam::unbounded(vec![0.0, 0.7]);
        let a = sample_increments(1, 4, 10, 1, grid.dt()).unwrap();
        let b = sample_increments(2, 4, 10, 1, grid.dt()).unwrap();
        let sum: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
        let ab = IncrementTensor::from_data(4, 10, 1, grid.dt(), sum).unwrap();
        let xa = [0.1, 0.2, -0.3, 1.0];
        let xb = [1.0, -0.5, 0.25, 0.0];
        let xab: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p + q).collect();
        let pa = em_forward_param(&model, &u, &xa, &a, &grid).unwrap();
        let pb = em_forward_param(&model, &u, &xb, &b, &grid).unwrap();
        let pab = em_forward_param(&model, &u, &xab, &ab, &grid).unwrap();
        for nu in 0..=10 {
            for mu in 0..4 {
                let lhs = pa.value(nu, mu, 0) + pb.value(nu, mu, 0);
                assert!((lhs - pab.value(nu, mu, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_binary_round_trip() {
        let p = path_1d(&[&[1.0, 3.0], &[2.0, -2.0]]);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SDEPATH1");
        assert_eq!(EnsemblePath::read_binary(&buf[..]).unwrap(), p);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let mut g = ControlGrid::new(2, 2, vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        g.values_mut().copy_from_slice(&[5.0, -5.0, 0.25, 2.0]);
        g.project();
        assert_eq!(g.values(), &[1.0, 0.0, 0.25, 1.0]);
        let once = g.clone();
        g.project();
        assert_eq!(g, once);
        assert!(ControlParam::new(vec![2.0], vec![0.0], vec![1.0]).is_err());
        assert!(ControlParam::new(vec![0.5], vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn weighted_grid_norm() {
        let g = ControlGrid::unbounded(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((g.weighted_norm(0.25) - 0.5 * 2.0).abs() < 1e-15);
    }
}
