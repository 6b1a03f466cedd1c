//! Keyed random streams.
//!
//! Every particle of every replica owns an independent ChaCha8 stream selected by
//! `(seed, replica, particle)`. The seed/replica pair picks the 256-bit key and the
//! particle index picks the 64-bit stream id, so draws never depend on the order in
//! which threads touch particles. Within a stream, draws are consumed in step order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Replica ids at or above this value are reserved for auxiliary streams
/// (reference populations, bootstrap resampling, oracle Monte Carlo).
pub const AUX_REPLICA_BASE: u64 = 1 << 62;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, replica: u64, particle: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed) ^ splitmix64(replica.rotate_left(17) ^ 0xA5A5_5A5A_DEAD_BEEF);
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(particle);
    rng
}

#[inline]
pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
