//! Forward-simulate the Ornstein-Uhlenbeck process under the controls that
//! make its mean and variance follow prescribed curves, and compare the
//! ensemble moments with the targets.

use sdeopt::brownian::sample_increments;
use sdeopt::models::ou::{
    ou_initial_ensemble, ou_perfect_control_grid, OuModel, OuParams, OuTargets, ReferenceTargets, VarianceFormula,
};
use sdeopt::sde::{em_forward, EnsembleStats, TimeGrid};

fn main() -> sdeopt::Result<()> {
    let theta = 1.0;
    let grid = TimeGrid::new(2.0 * std::f64::consts::PI, 128)?;
    let targets = ReferenceTargets { horizon: grid.horizon() };
    let model = OuModel::new(OuParams { theta })?;
    let m = 20_000;
    let x0 = ou_initial_ensemble(targets.eta(0.0), targets.sigma(0.0), m, 1);
    let inc = sample_increments(2, m, grid.steps(), 1, grid.dt())?;

    for formula in [VarianceFormula::VarianceOde, VarianceFormula::Displayed] {
        let control = ou_perfect_control_grid(theta, &targets, &grid, formula)?;
        let path = em_forward(&model, &control, &x0, &inc, &grid)?;
        let stats = EnsembleStats::compute(&path, false)?;
        let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
        for (nu, t) in grid.nodes().enumerate() {
            mean_err = mean_err.max((stats.mean_at(nu, 0) - targets.eta(t)).abs());
            var_err = var_err.max((stats.variance_at(nu, 0) - targets.sigma(t)).abs());
        }
        println!("{formula:?}: sup |mean - eta| = {mean_err:.4}, sup |var - sigma| = {var_err:.4}");
    }
    Ok(())
}
