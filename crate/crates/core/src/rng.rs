//! Keyed, splittable randomness.
//!
//! Every random stream is a ChaCha8 generator whose 256-bit key is derived
//! from a tuple of integers, so any frame, subject or training stream can be
//! regenerated on its own without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Subject = 1,
    Session = 2,
    Frame = 3,
    Split = 4,
    Init = 5,
    Pairs = 6,
    Anchors = 7,
    Batches = 8,
    Probe = 9,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream, path...)`.
pub fn keyed(seed: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x5045_5442_454E_4348);
    state = splitmix64(state ^ stream as u64);
    for &p in path {
        state = splitmix64(state ^ p);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
