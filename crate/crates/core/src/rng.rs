// SPDX-License-Identifier: Apache-2.0

//! Portable random streams.
//!
//! Every stochastic routine in the crate draws from a [`SampleStream`]: a
//! ChaCha8 generator (`rand_chacha`, seeded through `seed_from_u64`) plus a
//! fixed set of derivations so the draws can be replayed in another language:
//!
//! * `open01`: `((x >> 11) + 0.5) * 2^-53` for the next `u64` `x`; never 0 or 1.
//! * `index(n)`: `(x * n) >> 64` computed in 128 bits.
//! * `standard_normal`: inverse CDF applied to one `open01` draw.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct SampleStream {
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * TWO_POW_NEG_53
    }

    /// Uniform draw on (lo, hi). Returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.open01();
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n`. Panics on `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() over an empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Bernoulli trial with success probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.open01() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.open01())
    }

    /// `dim` independent standard normal variates, in draw order.
    pub fn normal_vector(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.standard_normal()).collect()
    }

    /// Direction uniform on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vector(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// Quantile function of the standard normal distribution.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Derives an independent child seed (SplitMix64 finalizer over `seed` and `stream`).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
