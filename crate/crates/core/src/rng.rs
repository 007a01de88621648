//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, purpose)` and selected by a 64-bit stream index (one per
//! observation, Monte Carlo draw, or perturbation pair). Results therefore do
//! not depend on thread count or evaluation order. Normal variates use the
//! Box–Muller transform with the pure-Rust `libm` kernels so the bits are the
//! same on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream purposes; distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    MonteCarlo = 3,
    Scan = 4,
    Identifiability = 5,
    Cell = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of integer labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// A reproducible source of uniforms and standard normals.
pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[purpose as u64]));
        rng.set_stream(index);
        Stream { rng, spare: None }
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = libm::sqrt(-2.0 * libm::log(self.uniform()));
        let theta = std::f64::consts::TAU * self.uniform();
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normals(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal());
    }
}
