//! Seed lineage and driving noise.
//!
//! Every random stream is addressed by `(base seed, scenario, purpose,
//! particle)`. The four words form the 32-byte ChaCha8 key directly, so two
//! distinct addresses never share a stream and the draws of one particle do
//! not depend on how many other particles exist or on the order in which
//! they are simulated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum StreamPurpose {
    CommonW0 = 0,
    /// Independent part of `B⁰`, mixed with `W⁰` through `ρ₃`.
    CommonB0 = 1,
    /// Idiosyncratic volatility noise `B^i`.
    IdioVol = 2,
    /// Idiosyncratic asset noise `W^i`.
    IdioAsset = 3,
    /// Initial state `(X₀, σ₀)`.
    Initial = 4,
    /// Uniforms for the Brownian-bridge absorption test.
    Bridge = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub base: u64,
}

impl SeedLineage {
    pub fn new(base: u64) -> Self {
        Self { base }
    }

    pub fn rng(&self, scenario: u64, purpose: StreamPurpose, particle: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (i, word) in [self.base, scenario, purpose as u64, particle]
            .into_iter()
            .enumerate()
        {
            key[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Brownian increments shared by the whole pool in one scenario, plus the
/// address of every idiosyncratic stream.
///
/// Idiosyncratic increments are regenerated on demand from the lineage
/// rather than stored: a pool of 2·10⁴ names over 10⁴ steps would otherwise
/// hold 10⁸ doubles per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub dt: f64,
    pub n_steps: usize,
    pub scenario: u64,
    pub lineage: SeedLineage,
    pub common_w0: Vec<f64>,
    pub common_b0: Vec<f64>,
}

impl NoiseBundle {
    /// Draws `W⁰` and `B⁰ = ρ₃ W⁰ + √(1−ρ₃²) Z` for one scenario.
    pub fn generate(
        lineage: SeedLineage,
        scenario: u64,
        dt: f64,
        n_steps: usize,
        rho3: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(LpsvError::InvalidArgument(format!(
                "dt = {dt} must be positive"
            )));
        }
        if !(rho3 > -1.0 && rho3 < 1.0) {
            return Err(LpsvError::InvalidArgument(format!(
                "rho3 = {rho3} outside (-1, 1)"
            )));
        }
        let sq = dt.sqrt();
        let mut rw = lineage.rng(scenario, StreamPurpose::CommonW0, 0);
        let mut rb = lineage.rng(scenario, StreamPurpose::CommonB0, 0);
        let common_w0: Vec<f64> = (0..n_steps)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rw);
                sq * z
            })
            .collect();
        let mix = (1.0 - rho3 * rho3).sqrt();
        let common_b0 = common_w0
            .iter()
            .map(|&dw| {
                let z: f64 = StandardNormal.sample(&mut rb);
                rho3 * dw + mix * sq * z
            })
            .collect();
        Ok(Self {
            dt,
            n_steps,
            scenario,
            lineage,
            common_w0,
            common_b0,
        })
    }

    /// Bundle with prescribed common increments (tests, frozen noise).
    pub fn from_increments(
        lineage: SeedLineage,
        scenario: u64,
        dt: f64,
        common_w0: Vec<f64>,
        common_b0: Vec<f64>,
    ) -> Result<Self> {
        if common_w0.len() != common_b0.len() {
            return Err(LpsvError::InvalidArgument(format!(
                "increment lengths differ: {} vs {}",
                common_w0.len(),
                common_b0.len()
            )));
        }
        Ok(Self {
            dt,
            n_steps: common_w0.len(),
            scenario,
            lineage,
            common_w0,
            common_b0,
        })
    }

    /// Bundle with all common increments set to zero.
    pub fn quiet(lineage: SeedLineage, scenario: u64, dt: f64, n_steps: usize) -> Self {
        Self {
            dt,
            n_steps,
            scenario,
            lineage,
            common_w0: vec![0.0; n_steps],
            common_b0: vec![0.0; n_steps],
        }
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Fills `out` with the first `out.len()` increments of an
    /// idiosyncratic stream.
    pub fn fill_idio(&self, particle: u64, purpose: StreamPurpose, out: &mut [f64]) {
        let mut rng = self.idio_rng(particle, purpose);
        let sq = self.dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sq * z;
        }
    }

    pub fn idio_rng(&self, particle: u64, purpose: StreamPurpose) -> ChaCha8Rng {
        self.lineage.rng(self.scenario, purpose, particle)
    }

    /// Restriction to the first `n_steps` increments.
    pub fn truncated(&self, n_steps: usize) -> Self {
        let n = n_steps.min(self.n_steps);
        Self {
            dt: self.dt,
            n_steps: n,
            scenario: self.scenario,
            lineage: self.lineage,
            common_w0: self.common_w0[..n].to_vec(),
            common_b0: self.common_b0[..n].to_vec(),
        }
    }
}
