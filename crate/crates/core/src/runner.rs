//! Subcommand implementations behind the `sdeopt` binary.
//!
//! Every command reads a [`RunConfig`], runs inside a thread pool of the
//! configured size and writes CSV files into `output.dir`, each ending with
//! a `# seed=... config_hash=... version=...` line.

use std::path::PathBuf;

use crate::brownian::{derive_seed, sample_increments, tags, IncrementTensor};
use crate::config::{ControlInit, GradcheckKind, ModelName, RunConfig};
use crate::cost::{CorrCost, DesiredData, OuCost};
use crate::io::{fmt_f64, write_csv_file, write_stats_csv, RunMeta};
use crate::models::ou::{ou_initial_ensemble, ou_perfect_control_grid, OuModel, OuParams, OuTargets, ReferenceTargets};
use crate::models::spt::{pack_params, spt_equilibrate, unpack_params, SptModel};
use crate::optimize::{sgd_run, OptimizationHistory, OptimizerConfig};
use crate::sde::{em_forward, Control, ControlGrid, ControlParam, EnsembleStats, Model, TimeGrid};
use crate::verify::{fd_gradient_check, semidiscrete_convergence_study, ConvergenceProblem, CorruptedJacobian};
use crate::{Error, Result};

/// Environment variable that overrides `ensemble.threads`.
pub const THREADS_ENV: &str = "SDEOPT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Calibrate,
    Control,
    Gradcheck,
    Converge,
    Equilibrate,
    MakeData,
}

/// Files written and a one-line human summary. `passed` is false only for a
/// failed gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub passed: bool,
}

/// Runs `command` with the thread count from the config or the environment.
pub fn run(cfg: &RunConfig, command: Command) -> Result<Outcome> {
    let forced = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|t| *t > 0);
    run_with_threads(cfg, command, forced)
}

/// Like [`run`] with an explicit thread override.
pub fn run_with_threads(cfg: &RunConfig, command: Command, forced: Option<usize>) -> Result<Outcome> {
    cfg.validate()?;
    let threads = forced.unwrap_or(cfg.ensemble.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        cfg,
        grid: TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?,
        meta: RunMeta {
            seed: cfg.ensemble.seed,
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads_override: forced,
        },
    };
    std::fs::create_dir_all(&cfg.output.dir)?;
    pool.install(|| match command {
        Command::Simulate => ctx.simulate(),
        Command::Calibrate => ctx.calibrate(),
        Command::Control => ctx.control(),
        Command::Gradcheck => ctx.gradcheck(),
        Command::Converge => ctx.converge(),
        Command::Equilibrate => ctx.equilibrate(),
        Command::MakeData => ctx.make_data(),
    })
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    grid: TimeGrid,
    meta: RunMeta,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// OU pieces shared by the commands.
struct OuSetup {
    model: OuModel,
    data: DesiredData,
    analytic: Option<ReferenceTargets>,
    mean0: f64,
    var0: f64,
}

impl<'a> Ctx<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output.dir.join(name)
    }

    fn seed(&self, tag: u64) -> u64 {
        derive_seed(self.cfg.ensemble.seed, tag, 0)
    }

    fn increments(&self, channels: usize) -> Result<IncrementTensor> {
        sample_increments(
            self.seed(tags::INCREMENTS),
            self.cfg.ensemble.realizations,
            self.grid.steps(),
            channels,
            self.grid.dt(),
        )
    }

    fn bounds(&self, default_lower: Vec<f64>, default_upper: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let c = &self.cfg.control;
        let lower = if c.lower.is_empty() { default_lower } else { c.lower.clone() };
        let upper = if c.upper.is_empty() { default_upper } else { c.upper.clone() };
        (lower, upper)
    }

    fn optimizer(&self) -> OptimizerConfig {
        let o = &self.cfg.optimizer;
        OptimizerConfig {
            s0: o.s0,
            tol: o.tol,
            l_max: o.l_max,
            batch_size: self.cfg.ensemble.realizations,
            seed_base: self.cfg.ensemble.seed,
            divergence_guard: o.divergence_guard,
            keep_controls: false,
        }
    }

    fn write(&self, files: &mut Vec<PathBuf>, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let path = self.path(name);
        write_csv_file(&path, &self.meta, body)?;
        files.push(path);
        Ok(())
    }

    fn write_history(&self, files: &mut Vec<PathBuf>, history: &OptimizationHistory) -> Result<()> {
        self.write(files, "history.csv", |buf| history.write_csv(buf))
    }

    // ---- OU ----

    fn ou(&self) -> Result<OuSetup> {
        let model = OuModel::new(OuParams { theta: self.cfg.model.theta })?;
        let target = &self.cfg.cost.target;
        if target == "ou-reference" {
            let t = ReferenceTargets { horizon: self.grid.horizon() };
            Ok(OuSetup {
                model,
                data: DesiredData::from_ou_targets(&self.grid, &t)?,
                analytic: Some(t),
                mean0: t.eta(0.0),
                var0: t.sigma(0.0),
            })
        } else {
            let data = DesiredData::from_csv(target, &self.grid)?;
            if data.width() != 2 {
                return Err(usage("OU targets need t, eta, sigma columns"));
            }
            let (mean0, var0) = (data.at(0)[0], data.at(0)[1]);
            Ok(OuSetup { model, data, analytic: None, mean0, var0 })
        }
    }

    fn ou_grid_control(&self, ou: &OuSetup) -> Result<ControlGrid> {
        let (lower, upper) = self.bounds(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        let c = &self.cfg.control;
        match c.init {
            ControlInit::Perfect => {
                let targets = ou.analytic.as_ref().ok_or_else(|| usage("perfect controls need the ou-reference targets"))?;
                let u = ou_perfect_control_grid(ou.model.theta(), targets, &self.grid, c.formula.into())?;
                ControlGrid::new(2, self.grid.steps(), u.values().to_vec(), lower, upper)
            }
            ControlInit::Constant => {
                let u = if c.values.is_empty() { vec![0.0, 0.0] } else { c.values.clone() };
                ControlGrid::constant(&u, self.grid.steps(), lower, upper)
            }
        }
    }

    fn ou_param(&self) -> Result<ControlParam> {
        let (lower, upper) = self.bounds(vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        let u = if self.cfg.control.values.is_empty() { vec![0.0, 0.0] } else { self.cfg.control.values.clone() };
        ControlParam::new(u, lower, upper)
    }

    fn ou_cost(&self, ou: &OuSetup) -> OuCost {
        OuCost { data: ou.data.clone(), kappa: self.cfg.cost.kappa }
    }

    // ---- SPT ----

    fn spt(&self) -> Result<SptModel> {
        SptModel::new(self.cfg.spt_params()?)
    }

    fn spt_param(&self, pairs: &[[f64; 2]]) -> Result<ControlParam> {
        if pairs.is_empty() {
            return Err(usage("SPT commands need control.params = [[V0, d], ...]"));
        }
        let u = pack_params(&pairs.iter().map(|[v, d]| (*v, *d)).collect::<Vec<_>>());
        let r = u.len();
        let lower_default: Vec<f64> = (0..r).map(|k| if k % 2 == 0 { f64::NEG_INFINITY } else { 1e-6 }).collect();
        let (lower, upper) = self.bounds(lower_default, vec![f64::INFINITY; r]);
        ControlParam::new(u, lower, upper)
    }

    fn spt_cost(&self) -> Result<CorrCost> {
        if self.cfg.cost.target == "ou-reference" {
            return Err(usage("SPT needs cost.target pointing at a correlation CSV (t, value)"));
        }
        let data = DesiredData::from_csv(&self.cfg.cost.target, &self.grid)?;
        if data.width() != 1 {
            return Err(usage("SPT targets need t, value columns"));
        }
        Ok(CorrCost { data })
    }

    fn dump_binary(&self, files: &mut Vec<PathBuf>, inc: &IncrementTensor, path: &crate::sde::EnsemblePath) -> Result<()> {
        if self.cfg.output.binary {
            let (a, b) = (self.path("increments.bin"), self.path("path.bin"));
            inc.save(&a)?;
            path.save(&b)?;
            files.extend([a, b]);
        }
        Ok(())
    }

    // ---- commands ----

    fn simulate(&self) -> Result<Outcome> {
        let mut files = Vec::new();
        let m = self.cfg.ensemble.realizations;
        match self.cfg.model.name {
            ModelName::Ou => {
                let ou = self.ou()?;
                let u = self.ou_grid_control(&ou)?;
                let inc = self.increments(1)?;
                let x0 = ou_initial_ensemble(ou.mean0, ou.var0, m, self.seed(tags::INITIAL));
                let path = em_forward(&ou.model, &u, &x0, &inc, &self.grid)?;
                let stats = EnsembleStats::compute(&path, false)?;
                let n = self.grid.steps();
                let eta: Vec<f64> = (0..=n).map(|nu| if nu == n { ou.data.terminal()[0] } else { ou.data.at(nu)[0] }).collect();
                let sigma: Vec<f64> = (0..=n).map(|nu| if nu == n { ou.data.terminal()[1] } else { ou.data.at(nu)[1] }).collect();
                let mean_err = (0..=n).map(|nu| (stats.mean_at(nu, 0) - eta[nu]).abs()).fold(0.0, f64::max);
                let var_err = (0..=n).map(|nu| (stats.variance_at(nu, 0) - sigma[nu]).abs()).fold(0.0, f64::max);
                self.write(&mut files, "stats.csv", |buf| {
                    write_stats_csv(buf, &self.grid, &stats, &[("eta", eta), ("sigma", sigma)])
                })?;
                self.dump_binary(&mut files, &inc, &path)?;
                Ok(Outcome {
                    files,
                    summary: format!("simulate: sup |E - eta| = {mean_err:.4e}, sup |V - sigma| = {var_err:.4e}"),
                    passed: true,
                })
            }
            ModelName::Spt => {
                let model = self.spt()?;
                let u = self.spt_param(&self.cfg.control.params)?;
                let (path, inc) = self.spt_forward(&model, &u)?;
                let stats = EnsembleStats::compute(&path, true)?;
                let c0 = stats.correlation.as_ref().map(|c| c[0]).unwrap_or(f64::NAN);
                self.write(&mut files, "stats.csv", |buf| write_stats_csv(buf, &self.grid, &stats, &[]))?;
                self.dump_binary(&mut files, &inc, &path)?;
                Ok(Outcome { files, summary: format!("simulate: C(0) = {c0}"), passed: true })
            }
        }
    }

    fn spt_forward(&self, model: &SptModel, u: &ControlParam) -> Result<(crate::sde::EnsemblePath, IncrementTensor)> {
        let m = self.cfg.ensemble.realizations;
        let x0 = spt_equilibrate(model, u.values(), m, self.seed(tags::INITIAL), self.grid.dt())?;
        let inc = self.increments(model.dims().noise)?;
        let path = em_forward(model, u, &x0, &inc, &self.grid)?;
        Ok((path, inc))
    }

    fn calibrate(&self) -> Result<Outcome> {
        let mut files = Vec::new();
        let cfg = self.optimizer();
        let (u, history, pairs) = match self.cfg.model.name {
            ModelName::Ou => {
                let ou = self.ou()?;
                let cost = self.ou_cost(&ou);
                let (mean0, var0) = (ou.mean0, ou.var0);
                let sampler = |m: usize, seed: u64, _: &ControlParam| Ok(ou_initial_ensemble(mean0, var0, m, seed));
                let (u, h) = sgd_run(&ou.model, &cost, self.ou_param()?, sampler, &cfg, &self.grid)?;
                (u, h, None)
            }
            ModelName::Spt => {
                let model = self.spt()?;
                let cost = self.spt_cost()?;
                let dt = self.grid.dt();
                let sampler = |m: usize, seed: u64, u: &ControlParam| spt_equilibrate(&model, u.values(), m, seed, dt);
                let (u, h) = sgd_run(&model, &cost, self.spt_param(&self.cfg.control.params)?, sampler, &cfg, &self.grid)?;
                let pairs = unpack_params(u.values());
                (u, h, Some(pairs))
            }
        };
        self.write_history(&mut files, &history)?;
        self.write(&mut files, "params.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["component", "value"])?;
            for (k, v) in u.values().iter().enumerate() {
                w.write_record([k.to_string(), fmt_f64(*v)])?;
            }
            w.flush()?;
            Ok(())
        })?;
        let described = match &pairs {
            Some(p) => p.iter().map(|(v, d)| format!("(V0 = {v:.6}, d = {d:.6})")).collect::<Vec<_>>().join(" "),
            None => format!("{:?}", u.values()),
        };
        Ok(Outcome {
            files,
            summary: format!("calibrate: {} records, final {}", history.len(), described),
            passed: true,
        })
    }

    fn control(&self) -> Result<Outcome> {
        if self.cfg.model.name != ModelName::Ou {
            return Err(usage("the control command needs the ou model"));
        }
        let mut files = Vec::new();
        let ou = self.ou()?;
        let cost = self.ou_cost(&ou);
        let (mean0, var0) = (ou.mean0, ou.var0);
        let sampler = |m: usize, seed: u64, _: &ControlGrid| Ok(ou_initial_ensemble(mean0, var0, m, seed));
        let (u, history) = sgd_run(&ou.model, &cost, self.ou_grid_control(&ou)?, sampler, &self.optimizer(), &self.grid)?;
        self.write_history(&mut files, &history)?;
        self.write(&mut files, "control.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["nu", "t", "u_0", "u_1"])?;
            for nu in 0..self.grid.steps() {
                let col = u.at(nu);
                w.write_record([nu.to_string(), fmt_f64(self.grid.node(nu)), fmt_f64(col[0]), fmt_f64(col[1])])?;
            }
            w.flush()?;
            Ok(())
        })?;
        let rel = history.last().map(|r| r.rel_cost).unwrap_or(1.0);
        Ok(Outcome {
            files,
            summary: format!("control: {} records, final relative cost {rel:.4e}", history.len()),
            passed: true,
        })
    }

    fn gradcheck(&self) -> Result<Outcome> {
        let g = &self.cfg.gradcheck;
        let m = self.cfg.ensemble.realizations;
        let factor = g.corrupt_factor.unwrap_or(1.0);
        fn corrupt<M: Model>(inner: M, factor: f64) -> CorruptedJacobian<M> {
            CorruptedJacobian { inner, row: 0, col: 0, factor }
        }
        let report = match self.cfg.model.name {
            ModelName::Ou => {
                let ou = self.ou()?;
                let cost = self.ou_cost(&ou);
                let inc = self.increments(1)?;
                let x0 = ou_initial_ensemble(ou.mean0, ou.var0, m, self.seed(tags::INITIAL));
                let model = corrupt(ou.model, factor);
                match g.kind.unwrap_or(GradcheckKind::Grid) {
                    GradcheckKind::Grid => {
                        let u = self.ou_grid_control(&ou)?;
                        fd_gradient_check(&model, &cost, &u, &x0, &inc, &self.grid, g.h, g.tol)?
                    }
                    GradcheckKind::Param => {
                        fd_gradient_check(&model, &cost, &self.ou_param()?, &x0, &inc, &self.grid, g.h, g.tol)?
                    }
                }
            }
            ModelName::Spt => {
                if g.kind == Some(GradcheckKind::Grid) {
                    return Err(usage("SPT parameters are time independent; use gradcheck.kind = \"param\""));
                }
                let model = self.spt()?;
                let cost = self.spt_cost()?;
                let u = self.spt_param(&self.cfg.control.params)?;
                let x0 = spt_equilibrate(&model, u.values(), m, self.seed(tags::INITIAL), self.grid.dt())?;
                let inc = self.increments(model.dims().noise)?;
                fd_gradient_check(&corrupt(model, factor), &cost, &u, &x0, &inc, &self.grid, g.h, g.tol)?
            }
        };
        let mut files = Vec::new();
        self.write(&mut files, "gradcheck.csv", |buf| report.write_csv(buf))?;
        Ok(Outcome { files, summary: report.summary(), passed: report.passed })
    }

    fn converge(&self) -> Result<Outcome> {
        if self.cfg.model.name != ModelName::Ou {
            return Err(usage("the converge command needs the ou model"));
        }
        let ou = self.ou()?;
        let targets = ou.analytic.ok_or_else(|| usage("the converge command needs the ou-reference targets"))?;
        let c = &self.cfg.control;
        let theta = ou.model.theta();
        let constant = if c.values.is_empty() { (0.0, 1.0) } else { (c.values[0], c.values[1]) };
        let (init, formula) = (c.init, c.formula.into());
        let controls = move |t: f64| match init {
            ControlInit::Constant => constant,
            ControlInit::Perfect => {
                crate::models::ou::ou_perfect_controls(theta, &targets, t, formula).unwrap_or((f64::NAN, f64::NAN))
            }
        };
        let problem = ConvergenceProblem {
            theta,
            targets: &targets,
            horizon: self.grid.horizon(),
            kappa: self.cfg.cost.kappa,
            controls: &controls,
        };
        let table = semidiscrete_convergence_study(
            &problem,
            &self.cfg.converge.n_list,
            self.cfg.ensemble.realizations,
            self.cfg.ensemble.seed,
        )?;
        let mut files = Vec::new();
        self.write(&mut files, "convergence.csv", |buf| table.write_csv(buf))?;
        let errs: Vec<String> = table.rows.iter().map(|r| format!("N={}: {:.3e}", r.n, r.abs_err)).collect();
        Ok(Outcome { files, summary: format!("converge: {}", errs.join(", ")), passed: true })
    }

    fn equilibrate(&self) -> Result<Outcome> {
        let model = self.spt_only()?;
        let u = self.spt_param(&self.cfg.control.params)?;
        let m = self.cfg.ensemble.realizations;
        let x0 = spt_equilibrate(&model, u.values(), m, self.seed(tags::INITIAL), self.grid.dt())?;
        let d = model.dims().state;
        let mut files = Vec::new();
        self.write(&mut files, "equilibrated.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["mu".to_string()];
            header.extend((0..d).map(|i| format!("x_{i}")));
            w.write_record(&header)?;
            for mu in 0..m {
                let mut row = vec![mu.to_string()];
                row.extend(x0[mu * d..(mu + 1) * d].iter().map(|v| fmt_f64(*v)));
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        })?;
        Ok(Outcome { files, summary: format!("equilibrate: {m} realizations"), passed: true })
    }

    fn make_data(&self) -> Result<Outcome> {
        let model = self.spt_only()?;
        let planted = if self.cfg.data.planted.is_empty() { &self.cfg.control.params } else { &self.cfg.data.planted };
        let u = self.spt_param(planted)?;
        let (path, inc) = self.spt_forward(&model, &u)?;
        let stats = EnsembleStats::compute(&path, true)?;
        let corr = stats.correlation.clone().expect("correlation computed");
        let mut files = Vec::new();
        self.write(&mut files, "targets.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["t", "value"])?;
            for (nu, c) in corr.iter().enumerate() {
                w.write_record([fmt_f64(self.grid.node(nu)), fmt_f64(*c)])?;
            }
            w.flush()?;
            Ok(())
        })?;
        self.write(&mut files, "stats.csv", |buf| write_stats_csv(buf, &self.grid, &stats, &[]))?;
        self.dump_binary(&mut files, &inc, &path)?;
        Ok(Outcome { files, summary: format!("make-data: C(0) = {}, C(T) = {:.4}", corr[0], corr[corr.len() - 1]), passed: true })
    }

    fn spt_only(&self) -> Result<SptModel> {
        if self.cfg.model.name != ModelName::Spt {
            return Err(usage("this command needs the spt model"));
        }
        self.spt()
    }
}
