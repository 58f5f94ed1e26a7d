//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, stream, index)`, built from the
//! SplitMix64 finalizer. Nothing depends on platform RNG state, so a scene or
//! an initialization replays bit-identically anywhere.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a parent seed and a tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GOLDEN)))
}

/// Hashes a string tag (FNV-1a) so named streams can be derived from text.
pub fn tag_of(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    h
}

/// Raw 64 random bits at position `index` of the stream keyed by `seed`.
#[inline]
pub fn bits_at(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed).wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn uniform_at(seed: u64, index: u64) -> f64 {
    (bits_at(seed, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller on the uniform pair `2i`, `2i + 1`).
#[inline]
pub fn normal_at(seed: u64, index: u64) -> f64 {
    let u1 = 1.0 - uniform_at(seed, 2 * index);
    let u2 = uniform_at(seed, 2 * index + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential view over a counter-based stream.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn uniform(&mut self) -> f64 {
        let u = uniform_at(self.seed, self.counter);
        self.counter += 1;
        u
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let z = normal_at(self.seed, self.counter);
        self.counter += 1;
        z
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        let b = bits_at(self.seed, self.counter);
        self.counter += 1;
        ((u128::from(b) * u128::from(n)) >> 64) as u64
    }

    pub fn uniform_vec(&mut self, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform_in(lo, hi)).collect()
    }

    pub fn normal_vec(&mut self, len: usize, sigma: f64) -> Vec<f64> {
        (0..len).map(|_| sigma * self.normal()).collect()
    }
}
