//! Deterministic random-stream derivation.
//!
//! Every stochastic component draws from a labeled child stream derived from
//! one master seed. Derivation is a pure function of `(master, label, index)`,
//! so adding a consumer never perturbs the draws of existing consumers and
//! runs reproduce bit-identically across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a domain label, and an index.
///
/// The label keeps unrelated consumers (sampling, init, prompt shuffling, ...)
/// on disjoint streams even when they share an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let _ = splitmix64(&mut state);
    for &b in label.as_bytes() {
        state ^= u64::from(b);
        let _ = splitmix64(&mut state);
    }
    state ^= index;
    let _ = splitmix64(&mut state);
    splitmix64(&mut state)
}

/// A ChaCha stream seeded from [`derive_seed`].
///
/// ChaCha8 is used everywhere: it is fast, portable, and its output is
/// identical on every platform, unlike OS or hash-seeded generators.
pub fn derive_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = derive_seed(master, label, index);
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
