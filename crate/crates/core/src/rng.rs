//! Counter-addressable random streams.
//!
//! Every draw is addressed by `(seed, stream, word offset)` on a ChaCha8
//! keystream, so any path segment can be generated independently.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 32-bit keystream words consumed by one normal draw.
pub(crate) const WORDS_PER_NORMAL: u128 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64, word_pos: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    rng
}

/// Uniform on `(0, 1]`.
#[inline]
pub(crate) fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `[0, 1)`.
#[inline]
pub(crate) fn half_open_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box-Muller normals, one per pair of 64-bit words (the sine branch is
/// discarded so every draw has a fixed keystream footprint).
pub(crate) struct StandardNormals {
    rng: ChaCha8Rng,
}

impl StandardNormals {
    pub(crate) fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    #[inline]
    pub(crate) fn next(&mut self) -> f64 {
        let u1 = open_unit(&mut self.rng);
        let u2 = half_open_unit(&mut self.rng);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub(crate) fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }
}
