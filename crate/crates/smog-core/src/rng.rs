//! Deterministic stream derivation. Every random draw in the system comes
//! from a ChaCha8 stream keyed by the run seed plus a purpose tag and
//! structural indices (iteration, sample index, ...), so results never
//! depend on call order or scheduling.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent consumers of randomness decorrelated.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    Augment = 2,
    GroupInit = 3,
    Kmeans = 4,
    Shuffle = 5,
    RandomSelect = 6,
    Synthesis = 7,
    Eval = 8,
    Baseline = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 stream from the run seed, a purpose tag, and indices.
pub fn derive(seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x5f3759df9e3779b9;
    let mut mix = splitmix64(&mut state) ^ (stream as u64).wrapping_mul(0x9e3779b97f4a7c15);
    for &ix in indices {
        state ^= ix.wrapping_mul(0xff51afd7ed558ccd);
        mix ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state ^= mix;
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
