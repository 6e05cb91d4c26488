//! Run configuration: one TOML (or JSON) document with `model`, `grid`,
//! `ensemble`, `cost` and mode-specific sections. Unknown keys are rejected
//! and every value is validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::ou::VarianceFormula;
use crate::models::spt::{NoiseMode, SptParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub converge: ConvergeSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Ou,
    Spt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSetting {
    #[default]
    InverseFriction,
    FluctuationDissipation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    /// OU mean-reversion rate.
    #[serde(default = "one")]
    pub theta: f64,
    /// SPT frictions, tracer first.
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "one")]
    pub kappa_ext: f64,
    #[serde(default)]
    pub v0: f64,
    #[serde(default = "one")]
    pub kbt: f64,
    #[serde(default = "default_t_eq")]
    pub t_eq: f64,
    #[serde(default)]
    pub noise: NoiseSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(rename = "M")]
    pub realizations: usize,
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// `"ou-reference"` or a CSV file with `t,value` or `t,eta,sigma` columns.
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub kappa: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { target: default_target(), kappa: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlInit {
    /// OU perfect-tracking controls.
    Perfect,
    /// `values` on every step.
    #[default]
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FormulaSetting {
    #[default]
    VarianceOde,
    Displayed,
}

impl From<FormulaSetting> for VarianceFormula {
    fn from(f: FormulaSetting) -> Self {
        match f {
            FormulaSetting::VarianceOde => VarianceFormula::VarianceOde,
            FormulaSetting::Displayed => VarianceFormula::Displayed,
        }
    }
}

/// Control used by `simulate`, `control`, `gradcheck` and `converge` for OU,
/// and the parameters used by every SPT command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default)]
    pub init: ControlInit,
    /// OU: `(u1, u2)`. Ignored for SPT.
    #[serde(default)]
    pub values: Vec<f64>,
    /// SPT: `[[V0, d], ...]`, one pair per bath particle.
    #[serde(default)]
    pub params: Vec<[f64; 2]>,
    #[serde(default)]
    pub formula: FormulaSetting,
    /// Box bounds in the packed control coordinates, one entry per
    /// component `r`.
    #[serde(default)]
    pub lower: Vec<f64>,
    #[serde(default)]
    pub upper: Vec<f64>,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            init: ControlInit::Constant,
            values: Vec::new(),
            params: Vec::new(),
            formula: FormulaSetting::VarianceOde,
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default)]
    pub divergence_guard: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { s0: 1.0, tol: default_tol(), l_max: default_l_max(), divergence_guard: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckKind {
    Grid,
    Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_h")]
    pub tol: f64,
    /// Defaults to `grid` for OU and `param` for SPT.
    #[serde(default)]
    pub kind: Option<GradcheckKind>,
    /// Scales entry `(0, 0)` of `a_u`; for exercising the failure path.
    #[serde(default)]
    pub corrupt_factor: Option<f64>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { h: default_h(), tol: default_h(), kind: None, corrupt_factor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        Self { n_list: default_n_list() }
    }
}

/// `make-data`: planted SPT parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub planted: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Also dump increments and paths in the binary format.
    #[serde(default)]
    pub binary: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir(), binary: false }
    }
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_gamma() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn default_t_eq() -> f64 {
    10.0
}
fn default_target() -> String {
    "ou-reference".into()
}
fn default_tol() -> f64 {
    1e-6
}
fn default_l_max() -> usize {
    100
}
fn default_h() -> f64 {
    1e-5
}
fn default_n_list() -> Vec<usize> {
    vec![8, 16, 32, 64, 128]
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML. Relative
    /// paths inside the config resolve against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
        if self.cost.target != "ou-reference" && Path::new(&self.cost.target).is_relative() {
            self.cost.target = base.join(&self.cost.target).to_string_lossy().into_owned();
        }
    }

    /// Control dimension `r` of the configured model.
    pub fn control_dim(&self) -> usize {
        match self.model.name {
            ModelName::Ou => 2,
            ModelName::Spt => 2 * (self.model.gamma.len().saturating_sub(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(bad("grid.T must be positive"));
        }
        if self.grid.steps == 0 {
            return Err(bad("grid.N must be at least 1"));
        }
        if self.ensemble.realizations == 0 {
            return Err(bad("ensemble.M must be at least 1"));
        }
        if self.ensemble.threads == 0 {
            return Err(bad("ensemble.threads must be at least 1"));
        }
        if !(self.cost.kappa >= 0.0) {
            return Err(bad("cost.kappa must be non-negative"));
        }
        match m.name {
            ModelName::Ou => {
                if !(m.theta > 0.0) {
                    return Err(bad("model.theta must be positive"));
                }
                if !self.control.values.is_empty() && self.control.values.len() != 2 {
                    return Err(bad("control.values must hold (u1, u2) for OU"));
                }
            }
            ModelName::Spt => {
                self.spt_params()?;
                let k = m.gamma.len() - 1;
                if !self.control.params.is_empty() && self.control.params.len() != k {
                    return Err(bad(format!("control.params needs {k} (V0, d) pairs")));
                }
                if !self.data.planted.is_empty() && self.data.planted.len() != k {
                    return Err(bad(format!("data.planted needs {k} (V0, d) pairs")));
                }
                let pairs = self.control.params.iter().chain(&self.data.planted);
                if pairs.into_iter().any(|[_, d]| !(*d > 0.0 && d.is_finite())) {
                    return Err(bad("periods d must be positive"));
                }
            }
        }
        let r = self.control_dim();
        for (name, v) in [("lower", &self.control.lower), ("upper", &self.control.upper)] {
            if !v.is_empty() && v.len() != r {
                return Err(bad(format!("control.{name} needs {r} entries")));
            }
        }
        if !self.control.lower.is_empty()
            && !self.control.upper.is_empty()
            && self.control.lower.iter().zip(&self.control.upper).any(|(l, u)| !(l <= u))
        {
            return Err(bad("control.lower must not exceed control.upper"));
        }
        let o = &self.optimizer;
        if !(o.s0 > 0.0) || !(o.tol > 0.0) {
            return Err(bad("optimizer.s0 and optimizer.tol must be positive"));
        }
        let g = &self.gradcheck;
        if !(g.h > 0.0) || !(g.tol > 0.0) {
            return Err(bad("gradcheck.h and gradcheck.tol must be positive"));
        }
        if self.converge.n_list.is_empty() || self.converge.n_list.contains(&0) {
            return Err(bad("converge.n_list must hold positive step counts"));
        }
        Ok(())
    }

    pub fn spt_params(&self) -> Result<SptParams> {
        let m = &self.model;
        if m.gamma.len() < 2 {
            return Err(bad("model.gamma needs the tracer and at least one bath friction"));
        }
        let params = SptParams {
            gamma: m.gamma.clone(),
            kappa_ext: m.kappa_ext,
            v0: m.v0,
            kbt: m.kbt,
            t_eq: m.t_eq,
            noise: match m.noise {
                NoiseSetting::InverseFriction => NoiseMode::InverseFriction,
                NoiseSetting::FluctuationDissipation => NoiseMode::FluctuationDissipation,
            },
        };
        crate::models::spt::SptModel::new(params.clone()).map_err(|e| bad(e.to_string()))?;
        Ok(params)
    }

    /// SHA-256 of the canonical JSON encoding with the thread count and
    /// output location removed, first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.ensemble.threads = 0;
        canonical.output.dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
