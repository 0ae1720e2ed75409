//! Deterministic random number generation.
//!
//! Every stochastic operation in the crate draws from [`Rng`], a thin wrapper
//! around the counter-based ChaCha8 generator. The same (seed, stream) pair
//! produces the same value sequence on every platform. Parallel and resumable
//! work never shares a generator; it derives an independent substream per
//! (purpose, lane) instead, so the draw sequence does not depend on scheduling
//! or on where a run was interrupted.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Labels for independent substreams so that unrelated consumers of the same
/// master seed can never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Dataset,
    NetInit,
    Shuffle,
    Bernoulli,
    Transform,
    Corruption,
    Measure,
    Other(u8),
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Dataset => 1,
            StreamPurpose::NetInit => 2,
            StreamPurpose::Shuffle => 3,
            StreamPurpose::Bernoulli => 4,
            StreamPurpose::Transform => 5,
            StreamPurpose::Corruption => 6,
            StreamPurpose::Measure => 7,
            StreamPurpose::Other(t) => 0x100 + t as u64,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed-deterministic generator. Single-owner: never share one instance
/// across threads; derive substreams instead.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    chacha: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut chacha = ChaCha8Rng::seed_from_u64(seed);
        chacha.set_stream(stream);
        Self {
            seed,
            stream,
            chacha,
        }
    }

    /// Independent generator for (purpose, a, b) under the same master seed.
    pub fn substream(seed: u64, purpose: StreamPurpose, a: u64, b: u64) -> Self {
        let id = splitmix64(purpose.tag() ^ splitmix64(a ^ splitmix64(b)));
        Self::with_stream(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    pub fn next_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_range(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fair coin over {-1.0, +1.0}.
    pub fn bernoulli_pm1(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// One Poisson(rate) draw. Sequential-search inversion below rate 30,
    /// Hormann's PTRS transformed rejection above. Both paths use fixed-libm
    /// transcendentals so the stream is identical on every platform.
    pub fn poisson(&mut self, rate: f64) -> u64 {
        assert!(rate.is_finite() && rate >= 0.0, "poisson rate {rate}");
        if rate == 0.0 {
            0
        } else if rate < 30.0 {
            self.poisson_inversion(rate)
        } else {
            self.poisson_ptrs(rate)
        }
    }

    fn poisson_inversion(&mut self, rate: f64) -> u64 {
        let threshold = libm::exp(-rate);
        let mut k = 0u64;
        let mut prod = self.next_f64();
        while prod > threshold {
            k += 1;
            prod *= self.next_f64();
        }
        k
    }

    fn poisson_ptrs(&mut self, rate: f64) -> u64 {
        let b = 0.931 + 2.53 * libm::sqrt(rate);
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        let ln_rate = libm::log(rate);
        loop {
            let u = self.next_f64() - 0.5;
            let v = self.next_f64();
            let us = 0.5 - u.abs();
            let k = libm::floor((2.0 * a / us + b) * u + rate + 0.43);
            if k < 0.0 {
                continue;
            }
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if us < 0.013 && v > us {
                continue;
            }
            let accept = libm::log(v * inv_alpha / (a / (us * us) + b));
            if accept <= k * ln_rate - rate - ln_factorial(k as u64) {
                return k as u64;
            }
        }
    }
}

/// ln(k!) — exact accumulation for small k, Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE_LEN: u64 = 32;
    if k < TABLE_LEN {
        let mut acc = 0.0;
        for i in 2..=k {
            acc += libm::log(i as f64);
        }
        return acc;
    }
    let x = (k + 1) as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * libm::log(x) - x + 0.5 * libm::log(2.0 * std::f64::consts::PI)
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}
