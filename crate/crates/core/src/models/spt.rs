//! Stochastic Prandtl-Tomlinson model: a tracer in a moving harmonic trap
//! coupled to `K` bath particles through cosine potentials
//! `V_k(z) = V0_k cos(2 pi z / d_k)`.
//!
//! State `x = (x_tracer, x_bath_1, ..., x_bath_K)`, so `d = m = K + 1` and the
//! parameter vector is `u = (V0_1, 1/d_1, ..., V0_K, 1/d_K)`, `r = 2K`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::brownian::NormalStream;
use crate::sde::{em_step, Dims, Model, StepScratch};
use crate::{Error, Result};

/// Noise amplitude convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// `b_i = 1 / gamma_i` driven by standard Brownian increments.
    #[default]
    InverseFriction,
    /// `b_i = sqrt(2 kBT / gamma_i)`.
    FluctuationDissipation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SptParams {
    /// Friction coefficients, tracer first; `K = gamma.len() - 1`.
    pub gamma: Vec<f64>,
    pub kappa_ext: f64,
    /// Trap velocity.
    pub v0: f64,
    /// Thermal energy, only used in fluctuation-dissipation mode.
    pub kbt: f64,
    /// Equilibration time.
    pub t_eq: f64,
    pub noise: NoiseMode,
}

impl SptParams {
    pub fn bath_count(&self) -> usize {
        self.gamma.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone)]
pub struct SptModel {
    params: SptParams,
    amplitude: Vec<f64>,
}

impl SptModel {
    pub fn new(params: SptParams) -> Result<Self> {
        if params.gamma.len() < 2 {
            return Err(Error::validation("SPT model needs a tracer and at least one bath particle"));
        }
        if params.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::validation("friction coefficients must be positive"));
        }
        if !(params.kappa_ext > 0.0) {
            return Err(Error::validation("trap strength must be positive"));
        }
        if !params.v0.is_finite() {
            return Err(Error::validation("trap velocity must be finite"));
        }
        if params.noise == NoiseMode::FluctuationDissipation && !(params.kbt > 0.0) {
            return Err(Error::validation("kBT must be positive in fluctuation-dissipation mode"));
        }
        if !(params.t_eq >= 0.0) {
            return Err(Error::validation("equilibration time must be non-negative"));
        }
        let amplitude = params
            .gamma
            .iter()
            .map(|g| match params.noise {
                NoiseMode::InverseFriction => 1.0 / g,
                NoiseMode::FluctuationDissipation => (2.0 * params.kbt / g).sqrt(),
            })
            .collect();
        Ok(Self { params, amplitude })
    }

    pub fn params(&self) -> &SptParams {
        &self.params
    }

    pub fn bath_count(&self) -> usize {
        self.params.bath_count()
    }

    /// Diagonal diffusion entry of particle `i`.
    pub fn noise_amplitude(&self, i: usize) -> f64 {
        self.amplitude[i]
    }

    /// Stationary tracer variance when all interactions are switched off.
    pub fn free_tracer_variance(&self) -> f64 {
        let b = self.amplitude[0];
        b * b * self.params.gamma[0] / (2.0 * self.params.kappa_ext)
    }
}

/// `[(V0_k, d_k)] -> (V0_1, 1/d_1, ...)`.
pub fn pack_params(pairs: &[(f64, f64)]) -> Vec<f64> {
    pairs.iter().flat_map(|&(v, d)| [v, 1.0 / d]).collect()
}

/// Inverse of [`pack_params`].
pub fn unpack_params(u: &[f64]) -> Vec<(f64, f64)> {
    u.chunks_exact(2).map(|c| (c[0], 1.0 / c[1])).collect()
}

impl Model for SptModel {
    fn dims(&self) -> Dims {
        let k = self.bath_count();
        Dims {
            state: k + 1,
            noise: k + 1,
            control: 2 * k,
        }
    }

    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        let g = &self.params.gamma;
        let mut tracer = -self.params.kappa_ext * (x[0] - self.params.v0 * t);
        for k in 1..x.len() {
            let (v, w) = (u[2 * k - 2], u[2 * k - 1]);
            let force = 2.0 * PI * w * v * (2.0 * PI * w * (x[0] - x[k])).sin();
            tracer += force;
            out[k] = -force / g[k];
        }
        out[0] = tracer / g[0];
    }

    fn diffusion(&self, x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
        let d = x.len();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = self.amplitude[i];
        }
    }

    fn jac_ax(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        let g = &self.params.gamma;
        let d = x.len();
        out.fill(0.0);
        out[0] = -self.params.kappa_ext / g[0];
        for k in 1..d {
            let (v, w) = (u[2 * k - 2], u[2 * k - 1]);
            let stiff = 4.0 * PI * PI * w * w * v * (2.0 * PI * w * (x[0] - x[k])).cos();
            out[0] += stiff / g[0];
            out[k] = -stiff / g[0];
            out[k * d] = -stiff / g[k];
            out[k * d + k] = stiff / g[k];
        }
    }

    fn jac_au(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        let g = &self.params.gamma;
        let d = x.len();
        let r = u.len();
        out.fill(0.0);
        for k in 1..d {
            let (v, w) = (u[2 * k - 2], u[2 * k - 1]);
            let z = x[0] - x[k];
            let (s, c) = (2.0 * PI * w * z).sin_cos();
            let d_v = 2.0 * PI * w * s;
            let d_w = 2.0 * PI * (v * s + 2.0 * PI * v * w * z * c);
            out[2 * k - 2] = d_v / g[0];
            out[2 * k - 1] = d_w / g[0];
            out[k * r + 2 * k - 2] = -d_v / g[k];
            out[k * r + 2 * k - 1] = -d_w / g[k];
        }
    }

    fn diffusion_constant(&self) -> bool {
        true
    }
}

/// Model with the clock frozen at `t = 0`.
struct Frozen<'a, M: Model>(&'a M);

impl<M: Model> Model for Frozen<'_, M> {
    fn dims(&self) -> Dims {
        self.0.dims()
    }
    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        self.0.drift(x, u, 0.0, out)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        self.0.diffusion(x, u, 0.0, out)
    }
    fn jac_ax(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        self.0.jac_ax(x, u, 0.0, out)
    }
    fn jac_au(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        self.0.jac_au(x, u, 0.0, out)
    }
}

/// Number of `dt` steps used to cover the model's equilibration time.
pub fn equilibration_steps(model: &SptModel, dt: f64) -> usize {
    (model.params.t_eq / dt).round() as usize
}

/// Relaxes a cold start (every particle at the trap centre) in the trap
/// `V_ext(x, 0)` for the model's equilibration time and returns the
/// `M x d` terminal ensemble. Noise is drawn on the fly from `seed`.
pub fn spt_equilibrate(model: &SptModel, u: &[f64], realizations: usize, seed: u64, dt: f64) -> Result<Vec<f64>> {
    let dims = model.dims();
    if u.len() != dims.control {
        return Err(Error::validation(format!("SPT expects {} parameters, got {}", dims.control, u.len())));
    }
    if realizations == 0 || !(dt > 0.0) {
        return Err(Error::validation("equilibration needs M >= 1 and dt > 0"));
    }
    let d = dims.state;
    let steps = equilibration_steps(model, dt);
    let stream = NormalStream::new(seed);
    let frozen = Frozen(model);
    let sqrt_dt = dt.sqrt();
    let mut out = vec![0.0; realizations * d];
    let failure = out
        .par_chunks_mut(d)
        .enumerate()
        .filter_map(|(mu, x)| {
            let mut scratch = StepScratch::new(dims);
            let mut next = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut noise = vec![vec![0.0; steps]; d];
            for (j, row) in noise.iter_mut().enumerate() {
                stream.fill(mu as u64, j as u64, 0, row);
            }
            for nu in 0..steps {
                for j in 0..d {
                    db[j] = sqrt_dt * noise[j][nu];
                }
                em_step(&frozen, x, u, 0.0, dt, &db, &mut scratch, &mut next);
                if next.iter().any(|v| !v.is_finite() || v.abs() > crate::sde::BLOWUP_THRESHOLD) {
                    return Some((mu, nu + 1));
                }
                x.copy_from_slice(&next);
            }
            None
        })
        .min();
    if let Some((mu, nu)) = failure {
        return Err(Error::IntegrationBlowup { mu, nu });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::model_jacobian_error;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn params(k: usize) -> SptParams {
        SptParams {
            gamma: (0..=k).map(|i| 1.0 + 0.3 * i as f64).collect(),
            kappa_ext: 1.5,
            v0: 0.4,
            kbt: 0.5,
            t_eq: 10.0,
            noise: NoiseMode::InverseFriction,
        }
    }

    #[test]
    fn dimensions() {
        let m = SptModel::new(params(2)).unwrap();
        assert_eq!(m.dims(), Dims { state: 3, noise: 3, control: 4 });
        assert!(SptModel::new(SptParams { gamma: vec![1.0], ..params(1) }).is_err());
        assert!(SptModel::new(SptParams { gamma: vec![1.0, -1.0], ..params(1) }).is_err());
    }

    #[test]
    fn coincident_particles_feel_only_the_trap() {
        let p = params(2);
        let m = SptModel::new(p.clone()).unwrap();
        let x = [0.7, 0.7, 0.7];
        let mut out = [0.0; 3];
        m.drift(&x, &[1.0, 2.0, 0.5, 1.5], 2.0, &mut out);
        assert!((out[0] - (-p.kappa_ext * (0.7 - p.v0 * 2.0) / p.gamma[0])).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn inverse_friction_noise_amplitude() {
        let m = SptModel::new(params(2)).unwrap();
        let mut b = [0.0; 9];
        m.diffusion(&[0.0; 3], &[0.0; 4], 0.0, &mut b);
        for i in 0..3 {
            assert_eq!(b[i * 3 + i], 1.0 / m.params().gamma[i]);
        }
        let fdt = SptModel::new(SptParams { noise: NoiseMode::FluctuationDissipation, ..params(1) }).unwrap();
        assert!((fdt.noise_amplitude(1) - (2.0 * 0.5 / 1.3f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for k in [1usize, 2] {
            let m = SptModel::new(params(k)).unwrap();
            for _ in 0..20 {
                let x: Vec<f64> = (0..=k).map(|_| 2.0 * unit() - 1.0).collect();
                let u: Vec<f64> = (0..2 * k).map(|_| 0.3 + 1.5 * unit()).collect();
                let t = 3.0 * unit();
                let err = model_jacobian_error(&m, &x, &u, t);
                assert!(err <= 1e-6, "K={k} err={err}");
            }
        }
    }

    #[test]
    fn zero_equilibration_time_returns_cold_start() {
        let m = SptModel::new(SptParams { t_eq: 0.0, ..params(1) }).unwrap();
        let x = spt_equilibrate(&m, &[1.0, 1.0], 5, 3, 0.01).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn free_tracer_reaches_trap_variance() {
        let p = SptParams {
            gamma: vec![1.0, 1.0],
            kappa_ext: 1.0,
            v0: 0.0,
            kbt: 0.5,
            t_eq: 10.0,
            noise: NoiseMode::InverseFriction,
        };
        let m = SptModel::new(p).unwrap();
        let m_real = 10_000;
        let x = spt_equilibrate(&m, &[0.0, 1.0], m_real, 8, 0.01).unwrap();
        let tracer: Vec<f64> = x.chunks(2).map(|c| c[0]).collect();
        let mean = tracer.iter().sum::<f64>() / m_real as f64;
        let var = tracer.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m_real as f64;
        let target = m.free_tracer_variance();
        assert!((var - target).abs() <= 0.1 * target, "var {var} target {target}");
    }

    #[test]
    fn seeds_differ_but_agree_statistically() {
        let m = SptModel::new(params(1)).unwrap();
        let a = spt_equilibrate(&m, &[1.0, 1.0], 4000, 1, 0.02).unwrap();
        let b = spt_equilibrate(&m, &[1.0, 1.0], 4000, 2, 0.02).unwrap();
        assert_ne!(a, b);
        let stats = |x: &[f64]| {
            let v: Vec<f64> = x.chunks(2).map(|c| c[0]).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            (mean, var / n)
        };
        let (ma, sa) = stats(&a);
        let (mb, sb) = stats(&b);
        assert!((ma - mb).abs() <= 5.0 * (sa + sb).sqrt());
    }

    #[test]
    fn packing_examples() {
        assert_eq!(pack_params(&[(1.0, 1.0), (0.5, 2.0)]), vec![1.0, 1.0, 0.5, 0.5]);
        assert_eq!(unpack_params(&[1.0, 1.0, 0.5, 0.5]), vec![(1.0, 1.0), (0.5, 2.0)]);
    }

    proptest! {
        #[test]
        fn packing_round_trips(v in -10.0f64..10.0, d in 0.01f64..100.0) {
            let back = unpack_params(&pack_params(&[(v, d)]))[0];
            prop_assert_eq!(back.0, v);
            prop_assert!((back.1 - d).abs() <= 2.0 * f64::EPSILON * d);
        }
    }
}
