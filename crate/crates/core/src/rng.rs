//! Counter-based noise.
//!
//! Every sample is a pure function of `(seed, frame, step, counter)`, so
//! results do not depend on evaluation order or thread count. Keys are mixed
//! through nested splitmix64 finalizers; two consecutive hashes feed a
//! Box-Muller transform.

/// splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub frame: u64,
    pub step: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, frame: u64, step: u64) -> Self {
        Self { seed, frame, step }
    }

    #[inline]
    fn base(&self) -> u64 {
        splitmix64(splitmix64(splitmix64(self.seed) ^ self.frame) ^ self.step)
    }

    /// 64 random bits for `counter`.
    #[inline]
    pub fn bits(&self, counter: u64) -> u64 {
        splitmix64(self.base() ^ splitmix64(counter))
    }

    /// Uniform in (0, 1].
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        to_unit(self.bits(counter))
    }

    /// Standard normal sample.
    #[inline]
    pub fn gaussian(&self, counter: u64) -> f64 {
        let h1 = self.bits(counter);
        let h2 = splitmix64(h1);
        let u1 = to_unit(h1);
        let u2 = to_unit(h2);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[inline]
fn to_unit(h: u64) -> f64 {
    ((h >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}
