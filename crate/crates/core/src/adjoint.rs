//! Backward adjoint recursion and reduced-gradient assembly.
//!
//! With `S` the per-sample sources of a [`Cost`], the multipliers satisfy
//! `L_N = S_N` and
//! `L_nu = L_{nu+1} + dt a_x^T L_{nu+1} + sum_j dB_j b_jx^T L_{nu+1} + dt S_nu`.
//! The reduced gradient in the control's inner product is
//! `kappa u + (1/w) (1/M) sum_mu sum_nu [dt a_u^T L_{nu+1} + sum_j dB_j b_ju^T L_{nu+1}]`,
//! where `w` is the control weight (1 for parameters, `dt` for grids).

use std::io::Write;

use rayon::prelude::*;

use crate::brownian::IncrementTensor;
use crate::cost::{Cost, StateSources};
use crate::reduce;
use crate::sde::{em_forward, Control, EnsemblePath, Model, TimeGrid};
use crate::{Error, Result};

/// Multipliers `L[nu][mu]`, stored realization-major like [`EnsemblePath`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    data: Vec<f64>,
    steps: usize,
    realizations: usize,
    dim: usize,
}

impl AdjointPath {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, nu: usize, mu: usize) -> &[f64] {
        let start = (mu * (self.steps + 1) + nu) * self.dim;
        &self.data[start..start + self.dim]
    }
}

fn check_shapes<M: Model + ?Sized, C: Control>(
    model: &M,
    control: &C,
    path: &EnsemblePath,
    inc: &IncrementTensor,
) -> Result<()> {
    let dims = model.dims();
    if path.dim() != dims.state || control.dim() != dims.control {
        return Err(Error::validation(format!(
            "model has d = {}, r = {}; path has d = {}, control r = {}",
            dims.state,
            dims.control,
            path.dim(),
            control.dim()
        )));
    }
    control.check_steps(path.steps())?;
    if inc.realizations() != path.realizations() || inc.steps() != path.steps() || inc.channels() != dims.noise {
        return Err(Error::validation(format!(
            "increments are {}x{}x{}, path needs {}x{}x{}",
            inc.realizations(),
            inc.steps(),
            inc.channels(),
            path.realizations(),
            path.steps(),
            dims.noise
        )));
    }
    Ok(())
}

/// Backward solve for the multipliers driven by `cost`.
pub fn adjoint_backward<M, C>(
    model: &M,
    control: &C,
    path: &EnsemblePath,
    inc: &IncrementTensor,
    cost: &dyn Cost,
) -> Result<AdjointPath>
where
    M: Model + ?Sized,
    C: Control,
{
    check_shapes(model, control, path, inc)?;
    let sources = cost.sources(path)?;
    adjoint_from_sources(model, control, path, inc, &sources)
}

/// Backward solve with explicitly supplied sources.
pub fn adjoint_from_sources<M, C>(
    model: &M,
    control: &C,
    path: &EnsemblePath,
    inc: &IncrementTensor,
    sources: &StateSources,
) -> Result<AdjointPath>
where
    M: Model + ?Sized,
    C: Control,
{
    check_shapes(model, control, path, inc)?;
    if sources.steps() != path.steps() || sources.realizations() != path.realizations() || sources.dim() != path.dim() {
        return Err(Error::validation("sources do not match the path shape"));
    }
    let dims = model.dims();
    let (d, m) = (dims.state, dims.noise);
    let steps = path.steps();
    let grid = path.grid();
    let dt = grid.dt();
    let skip_bx = model.diffusion_constant();
    let row_len = (steps + 1) * d;
    let mut data = vec![0.0; path.realizations() * row_len];
    let failure = data
        .par_chunks_mut(row_len)
        .enumerate()
        .filter_map(|(mu, row)| {
            let mut ax = vec![0.0; d * d];
            let mut bx = vec![0.0; m * d * d];
            row[steps * d..].copy_from_slice(sources.get(steps, mu));
            if row[steps * d..].iter().any(|v| !v.is_finite()) {
                return Some((mu, steps));
            }
            for nu in (0..steps).rev() {
                let (head, tail) = row.split_at_mut((nu + 1) * d);
                let next = &tail[..d];
                let cur = &mut head[nu * d..];
                let x = path.state(nu, mu);
                let (u, t) = (control.at(nu), grid.node(nu));
                model.jac_ax(x, u, t, &mut ax);
                let src = sources.get(nu, mu);
                for k in 0..d {
                    let drift: f64 = (0..d).map(|i| ax[i * d + k] * next[i]).sum();
                    cur[k] = next[k] + dt * drift + dt * src[k];
                }
                if !skip_bx {
                    model.jac_bx(x, u, t, &mut bx);
                    let db = inc.step(mu, nu);
                    for j in 0..m {
                        let block = &bx[j * d * d..(j + 1) * d * d];
                        for k in 0..d {
                            let s: f64 = (0..d).map(|i| block[i * d + k] * next[i]).sum();
                            cur[k] += db[j] * s;
                        }
                    }
                }
                if cur.iter().any(|v| !v.is_finite()) {
                    return Some((mu, nu));
                }
            }
            None
        })
        .min();
    if let Some((mu, nu)) = failure {
        return Err(Error::AdjointBlowup { mu, nu });
    }
    Ok(AdjointPath {
        data,
        steps,
        realizations: path.realizations(),
        dim: d,
    })
}

/// `(1/M) sum_mu sum_nu [dt a_u^T L_{nu+1} + sum_j dB_j b_ju^T L_{nu+1}]`,
/// laid out like the control's flat values.
pub fn state_sensitivity<M, C>(
    model: &M,
    control: &C,
    path: &EnsemblePath,
    adj: &AdjointPath,
    inc: &IncrementTensor,
) -> Result<Vec<f64>>
where
    M: Model + ?Sized,
    C: Control,
{
    check_shapes(model, control, path, inc)?;
    if adj.steps() != path.steps() || adj.realizations() != path.realizations() || adj.dim() != path.dim() {
        return Err(Error::validation("adjoint does not match the path shape"));
    }
    let dims = model.dims();
    let (d, m, r) = (dims.state, dims.noise, dims.control);
    let grid = path.grid();
    let dt = grid.dt();
    let with_bu = !model.diffusion_constant();
    let len = control.values().len();
    let mut totals = reduce::accumulate(path.realizations(), len, |mu, acc| {
        let mut au = vec![0.0; d * r];
        let mut bu = vec![0.0; m * d * r];
        for nu in 0..path.steps() {
            let x = path.state(nu, mu);
            let (u, t) = (control.at(nu), grid.node(nu));
            let lam = adj.get(nu + 1, mu);
            let slot = &mut acc[control.offset(nu)..control.offset(nu) + r];
            model.jac_au(x, u, t, &mut au);
            for k in 0..r {
                slot[k] += dt * (0..d).map(|i| au[i * r + k] * lam[i]).sum::<f64>();
            }
            if with_bu {
                model.jac_bu(x, u, t, &mut bu);
                let db = inc.step(mu, nu);
                for j in 0..m {
                    let block = &bu[j * d * r..(j + 1) * d * r];
                    for k in 0..r {
                        slot[k] += db[j] * (0..d).map(|i| block[i * r + k] * lam[i]).sum::<f64>();
                    }
                }
            }
        }
    });
    let inv_m = 1.0 / path.realizations() as f64;
    totals.iter_mut().for_each(|v| *v *= inv_m);
    Ok(totals)
}

/// Reduced gradient for any control type, in its own inner product.
pub fn reduced_gradient<M, C>(
    model: &M,
    control: &C,
    path: &EnsemblePath,
    adj: &AdjointPath,
    inc: &IncrementTensor,
    kappa: f64,
) -> Result<Vec<f64>>
where
    M: Model + ?Sized,
    C: Control,
{
    let w = control.weight(path.grid().dt());
    let sens = state_sensitivity(model, control, path, adj, inc)?;
    Ok(control
        .values()
        .iter()
        .zip(&sens)
        .map(|(u, s)| kappa * u + s / w)
        .collect())
}

/// Gradient with respect to a time-independent parameter.
pub fn reduced_gradient_param<M: Model + ?Sized>(
    model: &M,
    u: &crate::sde::ControlParam,
    path: &EnsemblePath,
    adj: &AdjointPath,
    inc: &IncrementTensor,
    kappa: f64,
) -> Result<Vec<f64>> {
    reduced_gradient(model, u, path, adj, inc, kappa)
}

/// Gradient with respect to a grid control; entry `nu * r + i` belongs to
/// component `i` of column `nu`.
pub fn reduced_gradient_grid<M: Model + ?Sized>(
    model: &M,
    controls: &crate::sde::ControlGrid,
    path: &EnsemblePath,
    adj: &AdjointPath,
    inc: &IncrementTensor,
    kappa: f64,
) -> Result<Vec<f64>> {
    reduced_gradient(model, controls, path, adj, inc, kappa)
}

/// Cost value, gradient and forward path at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    pub gradient: Vec<f64>,
    /// Norm of the gradient in the control's inner product.
    pub grad_norm: f64,
    pub path: EnsemblePath,
}

/// Forward solve, cost value, adjoint and gradient on fixed increments.
pub fn evaluate<M, C>(
    model: &M,
    cost: &dyn Cost,
    control: &C,
    x0: &[f64],
    inc: &IncrementTensor,
    grid: &TimeGrid,
) -> Result<Evaluation>
where
    M: Model + ?Sized,
    C: Control,
{
    let path = em_forward(model, control, x0, inc, grid)?;
    let value = crate::cost::cost_value(cost, &path, control)?;
    let adj = adjoint_backward(model, control, &path, inc, cost)?;
    let gradient = reduced_gradient(model, control, &path, &adj, inc, cost.kappa())?;
    let grad_norm = (control.weight(grid.dt()) * gradient.iter().map(|g| g * g).sum::<f64>()).sqrt();
    Ok(Evaluation {
        cost: value,
        gradient,
        grad_norm,
        path,
    })
}

/// Cost value only.
pub fn objective<M, C>(
    model: &M,
    cost: &dyn Cost,
    control: &C,
    x0: &[f64],
    inc: &IncrementTensor,
    grid: &TimeGrid,
) -> Result<f64>
where
    M: Model + ?Sized,
    C: Control,
{
    let path = em_forward(model, control, x0, inc, grid)?;
    crate::cost::cost_value(cost, &path, control)
}

/// Writes `component,value` rows for parameters or `component,nu,value`
/// rows for grid controls (`steps = Some(N)`).
pub fn write_gradient_csv<W: Write>(out: W, gradient: &[f64], dim: usize, steps: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    match steps {
        None => {
            w.write_record(["component", "value"])?;
            for (i, g) in gradient.iter().enumerate() {
                w.write_record([i.to_string(), crate::io::fmt_f64(*g)])?;
            }
        }
        Some(n) => {
            if gradient.len() != dim * n {
                return Err(Error::validation("gradient length does not match r x N"));
            }
            w.write_record(["component", "nu", "value"])?;
            for i in 0..dim {
                for nu in 0..n {
                    w.write_record([i.to_string(), nu.to_string(), crate::io::fmt_f64(gradient[nu * dim + i])])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
