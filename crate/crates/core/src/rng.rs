//! Deterministic, addressable random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream whose key is derived
//! from the run seed and an index path such as `(domain, pool, walker)`.
//! Streams never depend on iteration order, so serial and parallel runs
//! produce identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains keep different consumers of one seed disjoint.
pub mod domain {
    pub const SHARED_ROTATION: u64 = 1;
    pub const WALKER: u64 = 2;
    pub const DISTRIBUTIONAL: u64 = 3;
    pub const MCMC: u64 = 4;
    pub const SAMPLE_THETA: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an index path into a 256-bit ChaCha key.
pub fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// The stream addressed by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, path))
}
