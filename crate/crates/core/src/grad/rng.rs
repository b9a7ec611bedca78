//! Counter-based pseudo-random numbers.
//!
//! The generator is splitmix64 driven by an explicit call counter, so its
//! entire state is the pair `(seed, counter)`. That buys two properties the
//! trainer depends on:
//!
//! * checkpoints can serialize the state exactly and resume mid-run with the
//!   same draw sequence;
//! * independent streams can be derived from a base seed by hashing a purpose
//!   tag plus loop indices, so the draws used for (say) feature noise at
//!   iteration 17, sample 3 do not depend on how many numbers any other part
//!   of the program consumed.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags for derived streams. The numeric values are part of the
/// checkpoint compatibility surface: changing them changes every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Noise = 3,
    Lambda = 4,
    Adversarial = 5,
    Tau = 6,
    Data = 7,
    Score = 8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn from_state(seed: u64, counter: u64) -> Self {
        Rng { seed, counter }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.counter)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms and
    /// keeps no cached second value, so the counter alone determines the
    /// sequence.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        let u2 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Integer in [0, n). Rejection-free modulo is fine here: n is always
    /// tiny compared to 2^64, so the bias is unobservable.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Derive an independent stream. The child seed depends only on the
    /// parent seed and the tag path, never on the parent counter.
    pub fn derive(&self, stream: Stream, path: &[u64]) -> Rng {
        let mut s = mix(self.seed ^ (stream as u64).wrapping_mul(GOLDEN));
        for (i, t) in path.iter().enumerate() {
            s = mix(s ^ t.wrapping_add((i as u64 + 2).wrapping_mul(GOLDEN)));
        }
        Rng { seed: s, counter: 0 }
    }
}
