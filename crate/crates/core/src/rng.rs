//! Deterministic counter-based random number generation.
//!
//! All randomness in the toolkit (synthetic scenes, RANSAC sampling) flows
//! through this module so that results are reproducible from a single seed,
//! independent of evaluation order or thread count.
//!
//! The generator is the splitmix64 finalizer evaluated at an arbitrary
//! counter, i.e. a pure function of `(key, counter)`:
//!
//! ```text
//! out(key, i) = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)   (wrapping)
//! mix64(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!           return z ^ (z >> 31)
//! ```
//!
//! Independent streams are derived by folding `(tag, index)` labels into the
//! key with the same mixer, so per-entity streams can be generated in any
//! order. Frozen test vectors below pin the exact bit patterns; any port to
//! another language can validate against them.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded random stream. Cheap to copy; `derive` forks a statistically
/// independent child stream from a list of labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    /// Root stream for a user-facing seed.
    pub fn root(seed: u64) -> Self {
        Stream {
            key: mix64(seed ^ 0x5BF0_3635_DEA8_3A53),
            counter: 0,
        }
    }

    /// Fork a child stream labelled by `tags` (e.g. `[TAG_CAMERA, index]`).
    pub fn derive(&self, tags: &[u64]) -> Stream {
        let mut key = self.key;
        for &t in tags {
            key = mix64(key.wrapping_add(GOLDEN).wrapping_add(t));
        }
        Stream { key, counter: 0 }
    }

    /// The raw counter-indexed output; does not advance the stream.
    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add((counter.wrapping_add(1)).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller; consumes two outputs.
    pub fn normal(&mut self) -> f64 {
        // Shift into (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// A partial Fisher-Yates draw of `k` distinct indices from `[0, n)`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Stream labels. Values are arbitrary but frozen: changing them changes
/// every fixture.
pub mod tag {
    pub const CAMERA: u64 = 1;
    pub const POINT: u64 = 2;
    pub const OBS_NOISE: u64 = 3;
    pub const OUTLIER_PICK: u64 = 4;
    pub const OUTLIER_PIXEL: u64 = 5;
    pub const PERTURB: u64 = 6;
    pub const CONFIDENCE: u64 = 7;
    pub const RANSAC: u64 = 8;
}
