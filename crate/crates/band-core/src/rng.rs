//! Deterministic stream derivation. Every random decision in a run (init
//! draws, shuffles, window offsets, dropout masks, noise) comes from a
//! ChaCha8 stream keyed by the run seed plus a structural tag, so results
//! are reproducible regardless of evaluation order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche for key mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent ChaCha8 stream from `(seed, tag, salts…)`.
pub fn stream(seed: u64, tag: &str, salts: &[u64]) -> ChaCha8Rng {
    let mut key = mix(seed ^ hash_tag(tag));
    for (i, s) in salts.iter().enumerate() {
        key = mix(key ^ s.rotate_left((i as u32 % 63) + 1));
    }
    let mut seed_bytes = [0u8; 32];
    let mut k = key;
    for chunk in seed_bytes.chunks_mut(8) {
        k = mix(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed_bytes)
}
