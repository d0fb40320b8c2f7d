//! Counter-based random streams. Every random decision in the crate draws
//! from a ChaCha8 stream keyed by (global seed, purpose tag, two counters),
//! so results never depend on call order, thread scheduling, or OS entropy.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a; tags are short static strings, collision risk is negligible.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent stream for (seed, tag, a, b).
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed ^ hash_tag(tag).rotate_left(17);
    let mut key = [0u8; 32];
    let mut mix = [0u64; 4];
    state = state.wrapping_add(splitmix64(&mut state) ^ a);
    state = state.wrapping_add(splitmix64(&mut state) ^ b);
    for m in &mut mix {
        *m = splitmix64(&mut state);
    }
    for (chunk, m) in key.chunks_exact_mut(8).zip(&mix) {
        chunk.copy_from_slice(&m.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
