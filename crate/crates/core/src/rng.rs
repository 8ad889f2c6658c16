//! Seeded, platform-independent random number generation.
//!
//! Everything stochastic in the crate (weight init, Gumbel noise, route
//! sampling, data synthesis, augmentation) draws from [`Rng`], a SplitMix64
//! generator. The state transition is pure 64-bit integer arithmetic, so a
//! given `(seed, stream)` pair reproduces the exact same byte sequence on
//! every platform.

/// SplitMix64 generator with a stream id folded into the seed.
///
/// Streams let independent consumers (e.g. one per dataset sample) share a
/// master seed without correlating their draws.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        // Decorrelate streams by mixing the stream id before xor-ing it in.
        Rng {
            state: mix(seed).wrapping_add(mix(stream.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Derive an independent generator for sub-stream `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        Rng {
            state: mix(self.state ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN))),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in (0, 1), never exactly 0 or 1. Safe as a log argument.
    #[inline]
    pub fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, n). Uses rejection to stay unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f32(&mut self) -> f32 {
        let u1 = self.next_open_f64();
        let u2 = self.next_open_f64();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Normal truncated to ±2σ, for weight init.
    pub fn trunc_normal_f32(&mut self, std: f32) -> f32 {
        loop {
            let z = self.normal_f32();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Standard Gumbel(0, 1) sample: -ln(-ln(U)).
    #[inline]
    pub fn gumbel_f32(&mut self) -> f32 {
        let u = self.next_open_f64();
        (-(-u.ln()).ln()) as f32
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.next_f32() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), in random order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first k slots end up a uniform sample.
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
