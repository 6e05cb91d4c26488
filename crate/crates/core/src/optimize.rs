//! Projected stochastic gradient method.
//!
//! Iteration `l` (0-based) draws a fresh realization set keyed by
//! `(seed_base, l)`, evaluates the cost and its adjoint gradient on it, and
//! steps `u <- P(u - s0 / (l + 1) * grad)`. The gradient norm used for
//! stopping is the norm of the control's inner product: Euclidean for
//! parameters, `sqrt(dt)` times Frobenius for grid controls.

use std::io::Write;

use crate::adjoint::{evaluate, Evaluation};
use crate::brownian::{derive_seed, sample_increments, tags};
use crate::cost::Cost;
use crate::io::fmt_f64;
use crate::sde::{Control, Model, TimeGrid};
use crate::{Error, Result};

/// Componentwise clamp of `v` into `[lower, upper]`.
pub fn project_box(v: &[f64], lower: &[f64], upper: &[f64]) -> Result<Vec<f64>> {
    if v.len() != lower.len() || v.len() != upper.len() {
        return Err(Error::validation("vector and bounds differ in length"));
    }
    if let Some(k) = (0..v.len()).find(|&k| !(lower[k] <= upper[k])) {
        return Err(Error::validation(format!("empty box in component {k}")));
    }
    Ok(v.iter().zip(lower.iter().zip(upper)).map(|(x, (lo, hi))| x.clamp(*lo, *hi)).collect())
}

/// `s0 / l` for iteration `l >= 1`.
pub fn step_size(s0: f64, l: usize) -> f64 {
    assert!(l >= 1, "step index starts at 1");
    s0 / l as f64
}

/// Settings of one optimization run. The regularization weight lives in the
/// [`Cost`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub s0: f64,
    pub tol: f64,
    pub l_max: usize,
    pub batch_size: usize,
    pub seed_base: u64,
    /// Retry an iteration once with half the step when the cost exceeds ten
    /// times its running minimum.
    pub divergence_guard: bool,
    /// Store the control at every record.
    pub keep_controls: bool,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::validation("s0 must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("tol must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        Ok(())
    }
}

/// One evaluated iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub l: usize,
    pub cost: f64,
    pub rel_cost: f64,
    pub grad_norm: f64,
    pub rel_grad_norm: f64,
    /// Step taken from this iterate; 0 for the last record.
    pub step: f64,
    pub control: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizationHistory {
    pub records: Vec<IterationRecord>,
    /// True when the run stopped on the gradient tolerance.
    pub converged: bool,
}

impl OptimizationHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// `l, cost, rel_cost, grad_norm, rel_grad_norm, step`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["l", "cost", "rel_cost", "grad_norm", "rel_grad_norm", "step"])?;
        for r in &self.records {
            w.write_record([
                r.l.to_string(),
                fmt_f64(r.cost),
                fmt_f64(r.rel_cost),
                fmt_f64(r.grad_norm),
                fmt_f64(r.rel_grad_norm),
                fmt_f64(r.step),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        a / b.abs()
    }
}

fn gradient_step<C: Control>(u: &C, grad: &[f64], step: f64) -> C {
    let mut next = u.clone();
    next.values_mut().iter_mut().zip(grad).for_each(|(v, g)| *v -= step * g);
    next.project();
    next
}

/// Runs the projected stochastic gradient method from `u0`.
///
/// `x0_sampler(batch_size, seed, control)` returns the `M x d` initial
/// ensemble for an iteration.
pub fn sgd_run<M, C, S>(
    model: &M,
    cost: &dyn Cost,
    u0: C,
    mut x0_sampler: S,
    cfg: &OptimizerConfig,
    grid: &TimeGrid,
) -> Result<(C, OptimizationHistory)>
where
    M: Model + ?Sized,
    C: Control,
    S: FnMut(usize, u64, &C) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if !u0.within_bounds() {
        return Err(Error::validation("initial control violates its bounds"));
    }
    let mut history = OptimizationHistory::default();
    if cfg.l_max == 0 {
        return Ok((u0, history));
    }
    let noise = model.dims().noise;
    let mut eval_at = |l: usize, u: &C| -> Result<Evaluation> {
        let seed = derive_seed(cfg.seed_base, tags::ITERATION, l as u64);
        let mut run = || -> Result<Evaluation> {
            let inc = sample_increments(
                derive_seed(seed, tags::INCREMENTS, 0),
                cfg.batch_size,
                grid.steps(),
                noise,
                grid.dt(),
            )?;
            let x0 = x0_sampler(cfg.batch_size, derive_seed(seed, tags::INITIAL, 0), u)?;
            evaluate(model, cost, u, &x0, &inc, grid)
        };
        run().map_err(|e| Error::Iteration {
            iteration: l,
            source: Box::new(e),
        })
    };

    let mut u = u0;
    let mut previous: Option<(C, Vec<f64>, f64)> = None;
    let mut first: Option<(f64, f64)> = None;
    let mut running_min = f64::INFINITY;
    for l in 0..=cfg.l_max {
        let mut ev = eval_at(l, &u)?;
        if cfg.divergence_guard && ev.cost > 10.0 * running_min {
            if let Some((prev_u, prev_grad, prev_step)) = &previous {
                u = gradient_step(prev_u, prev_grad, 0.5 * prev_step);
                ev = eval_at(l, &u)?;
            }
        }
        running_min = running_min.min(ev.cost);
        let (cost0, grad0) = *first.get_or_insert((ev.cost, ev.grad_norm));
        let converged = ev.grad_norm <= cfg.tol;
        let last = converged || l == cfg.l_max;
        let step = if last { 0.0 } else { step_size(cfg.s0, l + 1) };
        history.records.push(IterationRecord {
            l,
            cost: ev.cost,
            rel_cost: ratio(ev.cost, cost0),
            grad_norm: ev.grad_norm,
            rel_grad_norm: ratio(ev.grad_norm, grad0),
            step,
            control: cfg.keep_controls.then(|| u.values().to_vec()),
        });
        if last {
            history.converged = converged;
            break;
        }
        let next = gradient_step(&u, &ev.gradient, step);
        previous = Some((std::mem::replace(&mut u, next), ev.gradient, step));
    }
    Ok((u, history))
}
