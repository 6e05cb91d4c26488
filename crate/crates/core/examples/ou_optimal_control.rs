//! Steer the Ornstein-Uhlenbeck ensemble towards target mean and variance
//! curves with the projected stochastic gradient method, starting from the
//! zero control. The first steps overshoot into the control box before the
//! decreasing step size lets the iterates settle.

use sdeopt::cost::{DesiredData, OuCost};
use sdeopt::models::ou::{ou_initial_ensemble, OuModel, OuParams, OuTargets, ReferenceTargets};
use sdeopt::optimize::{sgd_run, OptimizerConfig};
use sdeopt::sde::{ControlGrid, TimeGrid};

fn main() -> sdeopt::Result<()> {
    let theta = 1.0;
    let grid = TimeGrid::new(2.0 * std::f64::consts::PI, 128)?;
    let targets = ReferenceTargets { horizon: grid.horizon() };
    let model = OuModel::new(OuParams { theta })?;
    let cost = OuCost { data: DesiredData::from_ou_targets(&grid, &targets)?, kappa: 0.0 };

    let u0 = ControlGrid::constant(&[0.0, 0.0], grid.steps(), vec![-10.0; 2], vec![10.0; 2])?;
    let cfg = OptimizerConfig {
        s0: 10.0,
        tol: 1e-6,
        l_max: 500,
        batch_size: 1000,
        seed_base: 401,
        divergence_guard: false,
        keep_controls: false,
    };
    let (mean0, var0) = (targets.eta(0.0), targets.sigma(0.0));
    let sampler = |m: usize, seed: u64, _: &ControlGrid| Ok(ou_initial_ensemble(mean0, var0, m, seed));
    let (control, history) = sgd_run(&model, &cost, u0, sampler, &cfg, &grid)?;

    for r in history.records.iter().step_by(50) {
        println!("l = {:3}  J/J0 = {:.4}  |grad| = {:.3e}", r.l, r.rel_cost, r.grad_norm);
    }
    let mid = grid.steps() / 2;
    println!("control at t = {:.3}: u1 = {:.3}, u2 = {:.3}", grid.node(mid), control.get(0, mid), control.get(1, mid));
    Ok(())
}
