//! Stable seed derivation. Every random draw in the pipeline is keyed by a
//! seed computed here so runs are reproducible across platforms and
//! toolchain versions (std's hasher makes no such promise).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable hash of a string label followed by integer components.
pub fn stable_hash(label: &str, parts: &[u64]) -> u64 {
    let mut h = fnv1a(label.as_bytes(), FNV_OFFSET);
    for p in parts {
        h = mix64(h ^ *p);
    }
    mix64(h)
}

/// `base + hash(query_id, purpose, parts)`.
pub fn derive_seed(base: u64, query_id: &str, purpose: Purpose, parts: &[u64]) -> u64 {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(parts);
    base.wrapping_add(stable_hash(query_id, &all))
}

/// Distinguishes the independent random streams drawn per candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Candidate = 1,
    Completion = 2,
    CompletionScore = 3,
    NextRegion = 4,
    NextAnswer = 5,
    NextScore = 6,
    PairSampling = 7,
    Retry = 8,
    Shuffle = 9,
    EvalAnswer = 10,
    Features = 11,
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
