//! Discrete cost against the exact continuous cost as the time step shrinks,
//! with all grids driven by the same Brownian paths.

use sdeopt::models::ou::ReferenceTargets;
use sdeopt::verify::{semidiscrete_convergence_study, ConvergenceProblem};

fn main() -> sdeopt::Result<()> {
    let horizon = 2.0 * std::f64::consts::PI;
    let targets = ReferenceTargets { horizon };
    let controls = |_t: f64| (0.0, 1.0);
    let problem = ConvergenceProblem { theta: 1.0, targets: &targets, horizon, kappa: 0.0, controls: &controls };
    let table = semidiscrete_convergence_study(&problem, &[8, 16, 32, 64, 128], 20_000, 5)?;
    table.write_csv(std::io::stdout())?;
    println!("non-monotone steps: {}", table.non_monotone_steps());
    Ok(())
}
