//! Sample a Brownian increment tensor, check its moments, coarsen it and
//! round-trip it through the binary format.

use sdeopt::brownian::{sample_increments, IncrementTensor};

fn main() -> sdeopt::Result<()> {
    let (realizations, steps, dt) = (20_000, 64, 1.0 / 64.0);
    let inc = sample_increments(7, realizations, steps, 2, dt)?;

    let values = inc.as_slice();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    println!("increments: mean {mean:+.2e}, variance {var:.4e} (dt = {dt:.4e})");

    // Summing pairs gives the increments of the same paths on a grid with 2 dt.
    let coarse = inc.coarsen(2)?;
    let sum = inc.get(0, 0, 1) + inc.get(0, 1, 1);
    println!("coarse step 0 of path 0, channel 1: {:.6} = {:.6}", coarse.get(0, 0, 1), sum);

    let dir = std::env::temp_dir().join("sdeopt-example");
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("increments.bin");
    inc.save(&file)?;
    let back = IncrementTensor::load(&file)?;
    println!(
        "binary round trip: {} x {} x {} values, identical = {}",
        back.realizations(),
        back.steps(),
        back.channels(),
        back.as_slice() == inc.as_slice()
    );
    Ok(())
}
