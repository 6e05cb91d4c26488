//! Drive the library from a configuration file, the same way the `sdeopt`
//! binary does. Pass a path to one of the files in `examples/configs`, or run
//! without arguments to use a small built-in simulation.

use sdeopt::config::RunConfig;
use sdeopt::runner::{run, Command};

const BUILTIN: &str = r#"
[model]
name = "ou"

[grid]
T = 6.283185307179586
N = 64

[ensemble]
M = 5000
seed = 9

[control]
init = "perfect"
"#;

fn main() -> sdeopt::Result<()> {
    let mut args = std::env::args().skip(1);
    let (cfg, command) = match (args.next(), args.next()) {
        (Some(command), Some(path)) => (RunConfig::load(&path)?, parse(&command)),
        _ => {
            let mut cfg = RunConfig::from_toml(BUILTIN)?;
            cfg.output.dir = std::env::temp_dir().join("sdeopt-run-config");
            (cfg, Command::Simulate)
        }
    };
    let outcome = run(&cfg, command)?;
    println!("{}", outcome.summary);
    for file in &outcome.files {
        println!("wrote {}", file.display());
    }
    let stats = std::fs::read_to_string(&outcome.files[0])?;
    for line in stats.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}

fn parse(command: &str) -> Command {
    match command {
        "simulate" => Command::Simulate,
        "calibrate" => Command::Calibrate,
        "control" => Command::Control,
        "gradcheck" => Command::Gradcheck,
        "converge" => Command::Converge,
        "equilibrate" => Command::Equilibrate,
        "make-data" => Command::MakeData,
        other => panic!("unknown command {other}"),
    }
}
