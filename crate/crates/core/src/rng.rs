//! Deterministic random number generation with named streams.
//!
//! Every source of randomness in the pipeline draws from a [`StreamRng`]
//! identified by `(master_seed, stream_name)`. The stream seed is the
//! SHA-256 digest of the master seed concatenated with the name, so streams
//! are statistically independent, reordering draws in one stream never
//! perturbs another, and any run can be replayed bit-exactly from its seed.
//!
//! Stream cursors (the ChaCha word position) are cheap to capture and
//! restore, which is what makes interrupted-and-resumed training runs
//! byte-identical to uninterrupted ones.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// A deterministic random stream derived from a master seed and a name.
pub struct StreamRng {
    rng: ChaCha8Rng,
}

impl StreamRng {
    /// Derives the stream keyed by `name` from `master_seed`.
    pub fn new(master_seed: u64, name: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        StreamRng {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `{0, 1, .., n-1}`. `n` must be non-zero.
    ///
    /// Uses rejection sampling on the top bits so the distribution is exact,
    /// not merely close, and stays reproducible across word sizes.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_usize requires n > 0");
        let n = n as u64;
        // Largest multiple of n that fits in u64; draws above it are biased.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via the Box-Muller transform.
    ///
    /// Spends two uniform draws per normal instead of caching the sine
    /// half-sample; that keeps the stream cursor a complete description of
    /// generator state, which checkpoint resume relies on.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln(u1) is finite; u2 in [0, 1).
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal draw with the given standard deviation, truncated to
    /// `±2·std` by rejection. Used for weight initialization.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fills a buffer with standard normal draws (see [`Self::normal`]).
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for slot in out.iter_mut() {
            *slot = self.normal();
        }
    }

    /// Current position in the stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores a position previously captured with [`Self::word_pos`].
    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}
