//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha12 stream keyed by
//! (master seed, purpose tag, two indices). Streams therefore depend only on
//! the configuration, never on thread scheduling or iteration order, which is
//! what makes parallel and sequential execution bitwise identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; good avalanche behavior for key derivation.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha12 stream from `(seed, tag, a, b)`.
///
/// The tag keeps different purposes decorrelated even when the indices
/// coincide (e.g. cohort sampling vs. mini-batch draws in the same round).
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha12Rng {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &byte in tag.as_bytes() {
        h = mix(h ^ u64::from(byte).wrapping_mul(0x0100_0000_01b3));
    }
    h = mix(h ^ a.wrapping_mul(0xd6e8_feb8_6659_fd93));
    h = mix(h ^ b.wrapping_mul(0xa3b1_9535_4a39_b70d));

    let mut key = [0u8; 32];
    let mut state = h;
    for word in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        word.copy_from_slice(&mix(state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Draws `k` distinct indices from `[0, n)`, uniform over all `k`-subsets
/// (partial Fisher-Yates, order discarded). Returned sorted ascending.
pub fn sample_distinct(rng: &mut impl rand::Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} distinct indices from [0, {n})");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut out = pool;
    out.truncate(k);
    out.sort_unstable();
    out
}

/// Tags used across the crate; collected here so no two call sites collide.
pub mod tags {
    pub const SYNTH_TRUTH: &str = "synth.truth";
    pub const SYNTH_DATA: &str = "synth.data";
    pub const SYNTH_NOISE: &str = "synth.noise";
    pub const DICT_GAUSSIAN: &str = "dict.gaussian";
    pub const COHORT: &str = "federation.cohort";
    pub const BATCH: &str = "local.batch";
    pub const RIP: &str = "dict.rip";
    pub const CONSTANTS: &str = "theory.constants";
}
