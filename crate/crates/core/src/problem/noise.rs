//! Counter-based Gaussian noise for the stochastic oracles.
//!
//! Every draw is keyed by `(seed, stream, counter)`: the triple is packed into a ChaCha
//! key, so draws are reproducible regardless of evaluation order and distinct triples
//! give independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    AdditiveGaussian,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseModel {
    pub fn gaussian(seed: u64) -> Self {
        Self {
            kind: NoiseKind::AdditiveGaussian,
            seed,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            seed: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind == NoiseKind::AdditiveGaussian
    }

    /// Deterministic standard-normal generator for one oracle call.
    pub fn rng(&self, stream: NoiseStream, counter: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
        key[16..24].copy_from_slice(&counter.to_le_bytes());
        key[24..].copy_from_slice(b"unibio\0\0");
        ChaCha8Rng::from_seed(key)
    }

    pub fn perturb_vector(&self, v: &mut Vector, sigma: f64, stream: NoiseStream, counter: u64) {
        if !self.is_active() || sigma == 0.0 {
            return;
        }
        let mut rng = self.rng(stream, counter);
        for vi in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *vi += sigma * z;
        }
    }

    pub fn perturb_matrix(&self, m: &mut Matrix, sigma: f64, stream: NoiseStream, counter: u64) {
        if !self.is_active() || sigma == 0.0 {
            return;
        }
        let mut rng = self.rng(stream, counter);
        for mi in m.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *mi += sigma * z;
        }
    }
}

/// Identifies the random stream an oracle output draws its noise from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum NoiseStream {
    UpperGrad = 0,
    UpperGenGrad = 1,
    LowerGrad = 2,
    Cross = 3,
    GenJacobian = 4,
}

/// Oracle families used for accounting. The upper gradient and the generalized upper
/// derivative share one sample `xi`, so they count as a single upper-level call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleFamily {
    Upper,
    Lower,
    Cross,
    GenJacobian,
}

/// Caller-owned per-family call counters.
///
/// Each stochastic oracle call consumes the current counter of its family as the noise
/// key and then advances it, so the counters double as oracle-call tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleClock {
    pub upper: u64,
    pub lower: u64,
    pub cross: u64,
    pub gen_jacobian: u64,
}

impl OracleClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tick(&mut self, family: OracleFamily) -> u64 {
        let slot = match family {
            OracleFamily::Upper => &mut self.upper,
            OracleFamily::Lower => &mut self.lower,
            OracleFamily::Cross => &mut self.cross,
            OracleFamily::GenJacobian => &mut self.gen_jacobian,
        };
        let current = *slot;
        *slot += 1;
        current
    }

    pub fn total(&self) -> u64 {
        self.upper + self.lower + self.cross + self.gen_jacobian
    }

    /// Per-family difference `self - earlier`.
    pub fn since(&self, earlier: &OracleClock) -> OracleClock {
        OracleClock {
            upper: self.upper - earlier.upper,
            lower: self.lower - earlier.lower,
            cross: self.cross - earlier.cross,
            gen_jacobian: self.gen_jacobian - earlier.gen_jacobian,
        }
    }
}
