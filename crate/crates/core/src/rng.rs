//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! counter-based generator whose output is fixed by (key, stream, word
//! position) and identical on every platform. The 64-bit seed becomes the key
//! and a purpose-specific stream id keeps independent draws apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Stream ids. Candidate noise uses `NOISE + candidate`.
pub mod streams {
    pub const PROJECTIONS: u64 = 1;
    pub const NULL_EMBEDDING: u64 = 2;
    pub const NOISE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id derived from a token string, so equal tokens share an embedding.
pub fn token_stream(token: &str) -> u64 {
    let digest = Sha256::digest(token.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) | (1 << 63)
}

pub fn gaussian<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(StandardNormal.sample(rng))).collect()
}

/// `n` draws from `U[-half_width, half_width]`.
pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, half_width: f64) -> Vec<T> {
    let dist = Uniform::new_inclusive(-half_width, half_width).expect("valid uniform bounds");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}
