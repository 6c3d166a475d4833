//! Seeded random streams.
//!
//! Every consumer of randomness (parameter init, shuffling, dropout, MLM
//! masking, synthetic data) draws from its own ChaCha stream derived from a
//! single run seed and a purpose label, so switching one consumer on or off
//! never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(purpose.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
