//! Stable hashing and seed derivation.
//!
//! Every random choice in the pipeline flows from one run seed through
//! [`derive_seed`]. The hash is FNV-1a (64-bit) followed by a SplitMix64
//! finalizer, so derived seeds are identical on every platform and process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag: `mix(fnv1a(le(seed) || tag))`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + tag.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    splitmix64(fnv1a64(&buf))
}

/// Same as [`derive_seed`] with an extra integer component (trial index, stage index...).
pub fn derive_seed_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    derive_seed(derive_seed(seed, tag), &index.to_string())
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seeded Fisher–Yates; only the first `prefix` positions are drawn.
///
/// Position `i` swaps with a uniform index in `i..len`. The first `prefix`
/// entries of the result equal the first `prefix` entries of a full shuffle
/// with the same seed, which is what makes nested selections possible.
pub fn fisher_yates_prefix<T>(items: &mut [T], prefix: usize, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let len = items.len();
    for i in 0..prefix.min(len) {
        let j = rng.random_range(i..len);
        items.swap(i, j);
    }
}

/// Seeded permutation of `0..len`.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    fisher_yates_prefix(&mut idx, len, seed);
    idx
}
