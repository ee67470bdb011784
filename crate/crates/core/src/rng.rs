//! Seeded random streams.
//!
//! Each stream is ChaCha20 (RFC 8439 block function, as implemented by
//! `rand_chacha`) keyed by `SHA-256(domain || 0x00 || seed || keys...)` with all
//! integers little-endian. Deriving one stream per (seed, prompt, position) or
//! (seed, token, trial) keeps results independent of scheduling order.
//!
//! Floats and bounded integers are drawn with the helpers below rather than
//! `rand`'s distributions so the mapping from stream bytes to samples is fixed
//! by this crate.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub fn derive_stream(seed: u64, domain: &str, keys: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    for key in keys {
        hasher.update(key.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

/// Uniform float in `[0, 1)` from the top 53 bits of one 64-bit draw.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Unbiased uniform integer in `[0, n)` by rejection.
pub fn below<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "cannot sample from an empty range");
    let n = n as u64;
    // Largest multiple of n that fits; draws at or above it are rejected.
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return (x % n) as usize;
        }
    }
}
