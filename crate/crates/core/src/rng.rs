//! Deterministic RNG derivation.
//!
//! Every stochastic site (model init, data synthesis, partitioning, client
//! selection, batch shuffling) derives its own ChaCha stream from a root seed
//! plus a domain tag and indices, so reruns are bit-identical and independent
//! sites never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags keep derived streams disjoint across call sites.
pub mod domain {
    pub const MODEL_INIT: u64 = 0x01;
    pub const DATA_SYNTH: u64 = 0x02;
    pub const PARTITION: u64 = 0x03;
    pub const SELECTION: u64 = 0x04;
    pub const BATCHING: u64 = 0x05;
}

/// SplitMix64 step; decorrelates nearby seed/tag values.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha12 stream from a root seed, a domain tag, and indices.
pub fn derive_rng(root: u64, tag: u64, indices: &[u64]) -> ChaCha12Rng {
    let mut state = root ^ tag.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let mut mix = state;
        for (j, &idx) in indices.iter().enumerate() {
            mix ^= idx.wrapping_mul(0xe703_7ed1_a0b4_28db ^ ((i as u64) << 32 | j as u64));
        }
        let mut s = mix;
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        state = splitmix64(&mut state);
    }
    ChaCha12Rng::from_seed(key)
}
