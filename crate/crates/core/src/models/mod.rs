//! Built-in models: the Ornstein-Uhlenbeck control problem and the
//! Stochastic Prandtl-Tomlinson bath model.

pub mod ou;
pub mod spt;

pub use ou::{OuModel, OuParams, OuTargets, ReferenceTargets, VarianceFormula};
pub use spt::{NoiseMode, SptModel, SptParams};
