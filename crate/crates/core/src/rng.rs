//! Deterministic RNG streams.
//!
//! Every random decision in the crate draws from a stream derived from the run
//! seed plus a tag path (e.g. `[EPOCH_TAG, epoch, sample]`). Streams are
//! stateless to derive, so concurrent consumers can never perturb each other's
//! sequences and any part of a run can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tag constants keep stream derivations from colliding across subsystems.
pub const TAG_SYNTH_DIRECTIONS: u64 = 0x01;
pub const TAG_SYNTH_VIDEO: u64 = 0x02;
pub const TAG_INIT: u64 = 0x03;
pub const TAG_EPOCH: u64 = 0x04;
pub const TAG_AUGMENT: u64 = 0x05;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from `seed` and a tag path.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908; // sqrt(2) bits, fixed offset
    let mut key = [0u8; 32];
    for &t in tags {
        state ^= splitmix64(&mut state).wrapping_add(t);
        splitmix64(&mut state);
    }
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
