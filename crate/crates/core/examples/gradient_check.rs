//! Compare the adjoint gradient with central finite differences on common
//! random numbers, then show that a deliberately wrong model Jacobian is
//! caught.

use sdeopt::brownian::sample_increments;
use sdeopt::cost::{DesiredData, OuCost};
use sdeopt::models::ou::{ou_initial_ensemble, OuModel, OuParams, OuTargets, ReferenceTargets};
use sdeopt::sde::{ControlGrid, TimeGrid};
use sdeopt::verify::{fd_gradient_check, CorruptedJacobian};

fn main() -> sdeopt::Result<()> {
    let grid = TimeGrid::new(2.0 * std::f64::consts::PI, 16)?;
    let targets = ReferenceTargets { horizon: grid.horizon() };
    let model = OuModel::new(OuParams { theta: 1.0 })?;
    let cost = OuCost { data: DesiredData::from_ou_targets(&grid, &targets)?, kappa: 0.1 };
    let control = ControlGrid::from_fn(&grid, 2, vec![-10.0; 2], vec![10.0; 2], |t| vec![-0.5 + 0.3 * t.sin(), 0.8])?;
    let x0 = ou_initial_ensemble(targets.eta(0.0), targets.sigma(0.0), 64, 3);
    let inc = sample_increments(4, 64, grid.steps(), 1, grid.dt())?;

    let report = fd_gradient_check(&model, &cost, &control, &x0, &inc, &grid, 1e-5, 1e-5)?;
    println!("{}", report.summary());

    // Scale d a / d u1 by 1.5: the adjoint gradient no longer matches the cost.
    let broken = CorruptedJacobian { inner: model, row: 0, col: 0, factor: 1.5 };
    let report = fd_gradient_check(&broken, &cost, &control, &x0, &inc, &grid, 1e-5, 1e-5)?;
    println!("{}", report.summary());
    let flagged = report.flagged(1e-5);
    println!("{} flagged components, first few: {:?}", flagged.len(), &flagged[..flagged.len().min(6)]);
    Ok(())
}
