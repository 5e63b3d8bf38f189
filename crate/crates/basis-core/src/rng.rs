//! Splittable deterministic random number generation.
//!
//! Everything random in this crate (bin assignments, sign vectors, data
//! sampling, parameter init) flows through [`Rng`], a SplitMix64 generator.
//! SplitMix64 is a tiny, fully specified algorithm [^1], so sketch plans and
//! training runs reproduce bit-for-bit on any platform. Independent streams
//! are carved out of one root seed with [`derive`], which mixes a stream tag
//! into the seed through the same finalizer; derived streams are used for
//! bins vs. signs, per-step data sampling, and per-layer plan seeds.
//!
//! [^1]: Steele, Lea, Flood — "Fast splittable pseudorandom number
//!   generators" (the `mix` finalizer below is their MurmurHash3-derived
//!   64-bit mixer with constants 0xbf58476d1ce4e5b9 / 0x94d049bb133111eb).

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `(seed, stream)`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
}

/// Derive an independent stream seed from `(seed, a, b)`.
pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b)
}

/// Derive an independent stream seed from `(seed, a, b, c)`.
pub fn derive3(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    derive(derive2(seed, a, b), c)
}

/// SplitMix64 sequence generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in [0, bound). Lemire's multiply-shift
    /// rejection; `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let wide = u128::from(self.next_u64()) * u128::from(bound);
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are generated together and the
    /// spare is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform Rademacher draw: -1.0 or +1.0.
    #[inline]
    pub fn next_sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 { 1.0 } else { -1.0 }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
