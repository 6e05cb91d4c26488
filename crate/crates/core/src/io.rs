//! CSV helpers shared by the run commands: number formatting, the trailing
//! metadata line and the ensemble-statistics table.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::sde::EnsembleStats;
use crate::sde::TimeGrid;
use crate::Result;

/// Shortest round-trip decimal, switching to exponent form outside
/// `[1e-4, 1e15)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Provenance recorded at the end of every emitted CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    /// Thread count forced through the environment, if any.
    pub threads_override: Option<usize>,
}

impl RunMeta {
    pub fn line(&self) -> String {
        let mut line = format!("# seed={} config_hash={} version={}", self.seed, self.config_hash, self.version);
        if let Some(t) = self.threads_override {
            line.push_str(&format!(" threads_override={t}"));
        }
        line
    }
}

/// Renders a CSV with `body`, appends the metadata line and writes the file.
pub fn write_csv_file<F>(path: &Path, meta: &RunMeta, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    body(&mut buf)?;
    writeln!(buf, "{}", meta.line())?;
    fs::write(path, buf)?;
    Ok(())
}

/// `nu, t, mean, variance[, corr][, extra...]` for `d = 1`, or
/// `mean_i, var_i` column pairs for larger states.
pub fn write_stats_csv<W: Write>(
    out: W,
    grid: &TimeGrid,
    stats: &EnsembleStats,
    extra: &[(&str, Vec<f64>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = stats.dim;
    let mut header = vec!["nu".to_string(), "t".to_string()];
    if d == 1 {
        header.extend(["mean".to_string(), "variance".to_string()]);
    } else {
        for i in 0..d {
            header.extend([format!("mean_{i}"), format!("var_{i}")]);
        }
    }
    if stats.correlation.is_some() {
        header.push("corr".to_string());
    }
    header.extend(extra.iter().map(|(name, _)| name.to_string()));
    w.write_record(&header)?;
    for nu in 0..=grid.steps() {
        let mut row = vec![nu.to_string(), fmt_f64(grid.node(nu))];
        for i in 0..d {
            row.extend([fmt_f64(stats.mean_at(nu, i)), fmt_f64(stats.variance_at(nu, i))]);
        }
        if let Some(c) = &stats.correlation {
            row.push(fmt_f64(c[nu]));
        }
        row.extend(extra.iter().map(|(_, col)| fmt_f64(col[nu])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
