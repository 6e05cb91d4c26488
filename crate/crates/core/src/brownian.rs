//! Brownian increments from a counter-based generator.
//!
//! Every cell `(mu, nu, j)` of an [`IncrementTensor`] is a pure function of
//! `(seed, mu, nu, j)`: realization `mu` selects a ChaCha8 stream and noise
//! channel `j` selects a disjoint segment of that stream, inside which step
//! `nu` is the word offset. The tensor is therefore identical no matter how
//! realizations are split across threads, and a cell keeps its value when
//! `M`, `N` or `m` change.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Magic bytes opening a binary increment dump.
pub const INCREMENT_MAGIC: &[u8; 8] = b"SDEINCR1";

/// Per-channel segment length in 64-bit draws.
const CHANNEL_SPAN: u128 = 1 << 40;

/// Purpose tags for [`derive_seed`].
pub mod tags {
    pub const INCREMENTS: u64 = 0x494e_4352;
    pub const INITIAL: u64 = 0x494e_4954;
    pub const EQUILIBRATE: u64 = 0x4551_4c42;
    pub const ITERATION: u64 = 0x4954_4552;
    pub const PROBE: u64 = 0x5052_4f42;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for a `(tag, index)` purpose below `seed`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ tag) ^ index)
}

/// Standard normal draws addressed by `(row, channel, position)`.
#[derive(Clone)]
pub struct NormalStream {
    base: ChaCha8Rng,
    normal: Normal,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::standard(),
        }
    }

    /// Fills `out[k]` with the draw at position `start + k` of `(row, channel)`.
    pub fn fill(&self, row: u64, channel: u64, start: u64, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(row);
        rng.set_word_pos(2 * (channel as u128 * CHANNEL_SPAN + start as u128));
        for slot in out.iter_mut() {
            // Uniform on the open interval (0, 1) with 53 random bits.
            let uniform = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            *slot = self.normal.inverse_cdf(uniform);
        }
    }

    pub fn draw(&self, row: u64, channel: u64, position: u64) -> f64 {
        let mut out = [0.0];
        self.fill(row, channel, position, &mut out);
        out[0]
    }
}

/// Brownian increments `dB[mu][nu][j] ~ N(0, dt)`, realization-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTensor {
    data: Vec<f64>,
    realizations: usize,
    steps: usize,
    channels: usize,
    dt: f64,
    seed: Option<u64>,
}

fn check_shape(m_real: usize, steps: usize, channels: usize, dt: f64) -> Result<()> {
    if m_real == 0 || steps == 0 || channels == 0 {
        return Err(Error::validation(format!(
            "increment tensor dimensions must be positive, got M={m_real}, N={steps}, m={channels}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation(format!("time step must be positive and finite, got {dt}")));
    }
    Ok(())
}

/// Samples an `M x N x m` tensor of increments with variance `dt`.
pub fn sample_increments(
    seed: u64,
    realizations: usize,
    steps: usize,
    channels: usize,
    dt: f64,
) -> Result<IncrementTensor> {
    check_shape(realizations, steps, channels, dt)?;
    let stream = NormalStream::new(seed);
    let scale = dt.sqrt();
    let mut data = vec![0.0; realizations * steps * channels];
    data.par_chunks_mut(steps * channels)
        .enumerate()
        .for_each_init(
            || vec![0.0; steps],
            |buf, (mu, row)| {
                for j in 0..channels {
                    stream.fill(mu as u64, j as u64, 0, buf);
                    for (nu, z) in buf.iter().enumerate() {
                        row[nu * channels + j] = scale * z;
                    }
                }
            },
        );
    Ok(IncrementTensor {
        data,
        realizations,
        steps,
        channels,
        dt,
        seed: Some(seed),
    })
}

impl IncrementTensor {
    /// Wraps user-supplied increments laid out as `[mu][nu][j]`.
    pub fn from_data(
        realizations: usize,
        steps: usize,
        channels: usize,
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_shape(realizations, steps, channels, dt)?;
        if data.len() != realizations * steps * channels {
            return Err(Error::validation(format!(
                "expected {} increments, got {}",
                realizations * steps * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite increment at flat index {pos}")));
        }
        Ok(Self {
            data,
            realizations,
            steps,
            channels,
            dt,
            seed: None,
        })
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Seed the tensor was sampled from, `None` for loaded or user data.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, mu: usize, nu: usize, j: usize) -> f64 {
        self.data[(mu * self.steps + nu) * self.channels + j]
    }

    /// All increments of realization `mu`, step-major.
    pub fn realization(&self, mu: usize) -> &[f64] {
        let len = self.steps * self.channels;
        &self.data[mu * len..(mu + 1) * len]
    }

    /// The `m` increments of realization `mu` over step `nu`.
    pub fn step(&self, mu: usize, nu: usize) -> &[f64] {
        let start = (mu * self.steps + nu) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Sums groups of `factor` consecutive steps, giving the increments of the
    /// same Brownian paths on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::validation(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut data = vec![0.0; self.realizations * steps * self.channels];
        for mu in 0..self.realizations {
            for nu in 0..steps {
                for j in 0..self.channels {
                    data[(mu * steps + nu) * self.channels + j] =
                        (0..factor).map(|k| self.get(mu, nu * factor + k, j)).sum();
                }
            }
        }
        Ok(Self {
            data,
            realizations: self.realizations,
            steps,
            channels: self.channels,
            dt: self.dt * factor as f64,
            seed: self.seed,
        })
    }

    /// Writes the 40-byte header (magic, M, N, m, dt) and the little-endian
    /// payload in `[mu][nu][j]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INCREMENT_MAGIC)?;
        for dim in [self.realizations, self.steps, self.channels] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INCREMENT_MAGIC {
            return Err(Error::validation("not an increment dump (bad magic)"));
        }
        let mut word = [0u8; 8];
        let mut dims = [0usize; 3];
        for dim in dims.iter_mut() {
            r.read_exact(&mut word)?;
            *dim = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::validation("dimension does not fit in memory"))?;
        }
        r.read_exact(&mut word)?;
        let dt = f64::from_le_bytes(word);
        let [m_real, steps, channels] = dims;
        check_shape(m_real, steps, channels, dt)?;
        let mut data = Vec::with_capacity(m_real * steps * channels);
        for _ in 0..m_real * steps * channels {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Self::from_data(m_real, steps, channels, dt, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
