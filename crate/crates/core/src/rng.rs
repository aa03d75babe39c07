//! Named deterministic random streams.
//!
//! Every stochastic decision in the benchmark (parameter init, batch order,
//! splits, synthetic data, search candidates) draws from a stream derived
//! from `(master_seed, name, indices)`. Streams are independent of each
//! other and of call order, so adding a new consumer never shifts the draws
//! seen by existing ones — a requirement for run-to-run reproducibility.
//!
//! Derivation uses an explicit FNV-1a / splitmix64 chain rather than the
//! standard library hasher, whose output is not guaranteed stable across
//! Rust releases.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice; stable, well-distributed enough for seeding.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates sequential seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a ChaCha8 stream from a master seed, a stream name, and optional
/// integer indices (e.g. trial, scenario, epoch).
pub fn stream(master_seed: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut state = mix(master_seed ^ 0x5851_f42d_4c95_7f2d);
    state = mix(state ^ fnv1a(name.as_bytes()));
    for &idx in indices {
        state = mix(state ^ idx.wrapping_mul(0xd605_1f1f_90b2_39df).wrapping_add(1));
    }
    // Expand the 64-bit state into the full 256-bit ChaCha key.
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit digest of arbitrary bytes; used for content-derived run ids.
pub fn digest64(bytes: &[u8]) -> u64 {
    mix(fnv1a(bytes))
}

/// One `u64` drawn from the named stream; for seeding sub-experiments
/// (trials, grid cells) independently of each other.
pub fn derive_seed(master_seed: u64, name: &str, indices: &[u64]) -> u64 {
    stream(master_seed, name, indices).next_u64()
}
