//! Finite-difference gradient checks and the semidiscrete convergence study.

use std::io::Write;

use rayon::prelude::*;

use crate::adjoint::{evaluate, objective};
use crate::brownian::{derive_seed, sample_increments, tags, IncrementTensor};
use crate::cost::{Cost, DesiredData, OuCost};
use crate::io::fmt_f64;
use crate::models::ou::{ou_continuous_cost, ou_initial_ensemble, OuModel, OuParams, OuTargets};
use crate::sde::{em_forward, Control, ControlGrid, Dims, Model, TimeGrid};
use crate::{Error, Result};

/// Largest deviation of the four model Jacobians from central differences
/// at `(x, u, t)`, relative to `max(1, |fd|)`.
pub fn model_jacobian_error<M: Model + ?Sized>(model: &M, x: &[f64], u: &[f64], t: f64) -> f64 {
    let Dims { state: d, noise: m, control: r } = model.dims();
    let fd = |f: &dyn Fn(&[f64], &[f64], &mut [f64]), out_len: usize, wrt_x: bool, k: usize| -> Vec<f64> {
        let base = if wrt_x { x[k] } else { u[k] };
        let h = 1e-6 * base.abs().max(1.0);
        let (mut xp, mut up) = (x.to_vec(), u.to_vec());
        let (mut plus, mut minus) = (vec![0.0; out_len], vec![0.0; out_len]);
        if wrt_x { xp[k] = base + h } else { up[k] = base + h }
        f(&xp, &up, &mut plus);
        if wrt_x { xp[k] = base - h } else { up[k] = base - h }
        f(&xp, &up, &mut minus);
        plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * h)).collect()
    };
    let drift = |x: &[f64], u: &[f64], out: &mut [f64]| model.drift(x, u, t, out);
    let diffusion = |x: &[f64], u: &[f64], out: &mut [f64]| model.diffusion(x, u, t, out);
    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, numeric: f64| {
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    };

    let mut ax = vec![0.0; d * d];
    let mut au = vec![0.0; d * r];
    let mut bx = vec![0.0; m * d * d];
    let mut bu = vec![0.0; m * d * r];
    model.jac_ax(x, u, t, &mut ax);
    model.jac_au(x, u, t, &mut au);
    model.jac_bx(x, u, t, &mut bx);
    model.jac_bu(x, u, t, &mut bu);
    for k in 0..d {
        let da = fd(&drift, d, true, k);
        let db = fd(&diffusion, d * m, true, k);
        for i in 0..d {
            compare(ax[i * d + k], da[i]);
            for j in 0..m {
                compare(bx[(j * d + i) * d + k], db[i * m + j]);
            }
        }
    }
    for k in 0..r {
        let da = fd(&drift, d, false, k);
        let db = fd(&diffusion, d * m, false, k);
        for i in 0..d {
            compare(au[i * r + k], da[i]);
            for j in 0..m {
                compare(bu[(j * d + i) * r + k], db[i * m + j]);
            }
        }
    }
    worst
}

/// Wraps a model and scales one entry of `a_u` by `factor`, leaving every
/// other coefficient intact.
pub struct CorruptedJacobian<M> {
    pub inner: M,
    /// State row `i` of `a_u`.
    pub row: usize,
    /// Control column `k` of `a_u`.
    pub col: usize,
    pub factor: f64,
}

impl<M: Model> Model for CorruptedJacobian<M> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.drift(x, u, t, out)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.diffusion(x, u, t, out)
    }
    fn jac_ax(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.jac_ax(x, u, t, out)
    }
    fn jac_au(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.jac_au(x, u, t, out);
        out[self.row * self.dims().control + self.col] *= self.factor;
    }
    fn jac_bx(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.jac_bx(x, u, t, out)
    }
    fn jac_bu(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        self.inner.jac_bu(x, u, t, out)
    }
    fn diffusion_constant(&self) -> bool {
        self.inner.diffusion_constant()
    }
}

/// Componentwise comparison of the adjoint gradient with central
/// differences of the discrete cost.
///
/// `analytic[k]` is the directional derivative along the flat unit vector
/// `e_k`, i.e. the Riesz gradient times the control weight. The relative
/// error is `|analytic - fd| / max(|fd|, 1e-6 max|fd|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub fd: Vec<f64>,
    pub abs_err: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub h: f64,
    pub cost: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(analytic: Vec<f64>, fd: Vec<f64>, tol: f64, h: f64, cost: f64) -> Self {
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
        let abs_err: Vec<f64> = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs()).collect();
        let rel_err: Vec<f64> = abs_err.iter().zip(&fd).map(|(e, f)| e / f.abs().max(floor)).collect();
        let max_rel_err = rel_err.iter().fold(0.0f64, |a, v| a.max(*v));
        Self {
            passed: max_rel_err <= tol,
            analytic,
            fd,
            abs_err,
            rel_err,
            max_rel_err,
            tol,
            h,
            cost,
        }
    }

    /// Components whose relative error exceeds `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<usize> {
        (0..self.rel_err.len()).filter(|&k| self.rel_err[k] > threshold).collect()
    }

    /// `component, analytic, fd, abs_err, rel_err`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "analytic", "fd", "abs_err", "rel_err"])?;
        for k in 0..self.analytic.len() {
            w.write_record([
                k.to_string(),
                fmt_f64(self.analytic[k]),
                fmt_f64(self.fd[k]),
                fmt_f64(self.abs_err[k]),
                fmt_f64(self.rel_err[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let worst = (0..self.rel_err.len())
            .max_by(|a, b| self.rel_err[*a].total_cmp(&self.rel_err[*b]))
            .unwrap_or(0);
        format!(
            "gradcheck {}: {} components, max relative error {:.3e} (component {worst}) vs tol {:.1e}, h = {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.analytic.len(),
            self.max_rel_err,
            self.tol,
            self.h,
        )
    }
}

/// Checks the adjoint gradient at `control` against central differences
/// with step `h`, all evaluations sharing `x0` and `inc`.
pub fn fd_gradient_check<M, C>(
    model: &M,
    cost: &dyn Cost,
    control: &C,
    x0: &[f64],
    inc: &IncrementTensor,
    grid: &TimeGrid,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: Model + ?Sized,
    C: Control,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::validation("finite-difference step must be positive"));
    }
    for (k, v) in control.values().iter().enumerate() {
        let (lo, hi) = control.bounds(k);
        if !(v - h > lo && v + h < hi) {
            return Err(Error::NearBoundary { component: k, h });
        }
    }
    let ev = evaluate(model, cost, control, x0, inc, grid)?;
    let w = control.weight(grid.dt());
    let analytic: Vec<f64> = ev.gradient.iter().map(|g| w * g).collect();
    let fd = (0..control.values().len())
        .into_par_iter()
        .map(|k| {
            let shifted = |delta: f64| {
                let mut probe = control.clone();
                probe.values_mut()[k] += delta;
                objective(model, cost, &probe, x0, inc, grid)
            };
            Ok((shifted(h)? - shifted(-h)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GradCheckReport::new(analytic, fd, tol, h, ev.cost))
}

/// OU problem for the convergence study: analytic controls evaluated at the
/// left node of every interval.
pub struct ConvergenceProblem<'a> {
    pub theta: f64,
    pub targets: &'a dyn OuTargets,
    pub horizon: f64,
    pub kappa: f64,
    pub controls: &'a (dyn Fn(f64) -> (f64, f64) + Sync),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub discrete: f64,
    pub continuous: f64,
    pub abs_err: f64,
    /// Standard error of the discrete cost from sub-batches.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

/// Sub-batches used for the Monte-Carlo standard error.
pub const SUB_BATCHES: usize = 10;

impl ConvergenceTable {
    /// Number of rows whose error exceeds the previous row's.
    pub fn non_monotone_steps(&self) -> usize {
        self.rows.windows(2).filter(|w| w[1].abs_err > w[0].abs_err).count()
    }

    /// `N, J_N, J, abs_err, stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "J_N", "J", "abs_err", "stderr"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                fmt_f64(r.discrete),
                fmt_f64(r.continuous),
                fmt_f64(r.abs_err),
                fmt_f64(r.stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Discrete cost at every `N` in `n_list` against the continuous cost.
///
/// Increments are drawn once at the finest `N` and summed down to coarser
/// grids, so all rows share the same Brownian paths and initial ensemble.
pub fn semidiscrete_convergence_study(
    problem: &ConvergenceProblem<'_>,
    n_list: &[usize],
    realizations: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    let finest = *n_list.iter().max().ok_or_else(|| Error::validation("N list is empty"))?;
    if n_list.iter().any(|&n| n == 0 || finest % n != 0) {
        return Err(Error::validation("every N must divide the largest N"));
    }
    if realizations < SUB_BATCHES {
        return Err(Error::validation(format!("need at least {SUB_BATCHES} realizations")));
    }
    let model = OuModel::new(OuParams { theta: problem.theta })?;
    let fine_grid = TimeGrid::new(problem.horizon, finest)?;
    let fine = sample_increments(derive_seed(seed, tags::INCREMENTS, 0), realizations, finest, 1, fine_grid.dt())?;
    let x0 = ou_initial_ensemble(problem.targets.eta(0.0), problem.targets.sigma(0.0), realizations, derive_seed(seed, tags::INITIAL, 0));
    let continuous = ou_continuous_cost(
        problem.theta,
        problem.controls,
        problem.targets.eta(0.0),
        problem.targets.sigma(0.0),
        problem.targets,
        problem.horizon,
        problem.kappa,
        4096,
    )?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TimeGrid::new(problem.horizon, n)?;
        let inc = fine.coarsen(finest / n)?;
        let controls = ControlGrid::from_fn(&grid, 2, vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2], |t| {
            let (a, b) = (problem.controls)(t);
            vec![a, b]
        })?;
        let cost = OuCost {
            data: DesiredData::from_ou_targets(&grid, problem.targets)?,
            kappa: problem.kappa,
        };
        let path = em_forward(&model, &controls, &x0, &inc, &grid)?;
        let discrete = crate::cost::cost_value(&cost, &path, &controls)?;
        let size = realizations / SUB_BATCHES;
        let batches = (0..SUB_BATCHES)
            .map(|b| crate::cost::cost_value(&cost, &path.subset(b * size..(b + 1) * size)?, &controls))
            .collect::<Result<Vec<f64>>>()?;
        let mean = batches.iter().sum::<f64>() / SUB_BATCHES as f64;
        let var = batches.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (SUB_BATCHES - 1) as f64;
        rows.push(ConvergenceRow {
            n,
            discrete,
            continuous,
            abs_err: (discrete - continuous).abs(),
            stderr: (var / SUB_BATCHES as f64).sqrt(),
        });
    }
    Ok(ConvergenceTable { rows })
}
