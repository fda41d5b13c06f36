//! Deterministic stream derivation.
//!
//! One 64-bit seed describes a whole experiment; every consumer derives an
//! independent ChaCha stream from `(seed, component name)` so that adding
//! or reordering consumers never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the component name, mixed with the experiment seed.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = seed ^ name_hash(name);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Substream for per-item work inside a component (sample index, epoch, ...).
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{name}#{index}"))
}
