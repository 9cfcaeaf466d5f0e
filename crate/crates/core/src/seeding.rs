//! Deterministic seed derivation.
//!
//! One global seed fans out to every stochastic site (frame sampling, weight
//! init, the synthetic generator, pseudo-label simulation) by hashing the
//! site's identifying parts. FNV-1a is used because it is stable across
//! platforms and Rust versions, unlike `DefaultHasher`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Accumulating FNV-1a hasher for heterogeneous seed parts.
#[derive(Clone, Copy)]
pub struct SeedHasher(u64);

impl SeedHasher {
    pub fn new(seed: u64) -> Self {
        let mut h = SeedHasher(FNV_OFFSET);
        h.push_u64(seed);
        h
    }

    pub fn push_u64(&mut self, v: u64) -> &mut Self {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn push_str(&mut self, s: &str) -> &mut Self {
        for &b in s.as_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        // Length terminator so ("ab","c") and ("a","bc") differ.
        self.push_u64(s.len() as u64)
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Derive a child seed from a parent seed, a site label, and numeric parts.
pub fn derive_seed(seed: u64, site: &str, parts: &[u64]) -> u64 {
    let mut h = SeedHasher::new(seed);
    h.push_str(site);
    for &p in parts {
        h.push_u64(p);
    }
    h.finish()
}

/// Derive a seed that additionally depends on a sample id.
pub fn derive_sample_seed(seed: u64, site: &str, sample_id: &str, parts: &[u64]) -> u64 {
    let mut h = SeedHasher::new(seed);
    h.push_str(site);
    h.push_str(sample_id);
    for &p in parts {
        h.push_u64(p);
    }
    h.finish()
}

/// ChaCha RNG from a derived seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
