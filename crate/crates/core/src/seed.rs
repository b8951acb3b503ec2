//! Seed derivation and the pseudo-random streams used everywhere randomness
//! is needed.
//!
//! The algorithms are fixed so results are reproducible across platforms and
//! across independent implementations:
//!
//! * **Derivation**: `derive(parent, label)` is the first 8 bytes
//!   (little-endian) of `SHA-256(parent.to_le_bytes() || label)`.
//! * **Streams**: `stream(seed, counter)` is ChaCha8 keyed with
//!   `rand_core::SeedableRng::seed_from_u64(seed)` and positioned on stream
//!   number `counter`. Distinct counters give independent streams, so loops
//!   can be split across threads without changing their output.
//! * **Bounded integers**: `below(rng, bound)` draws `x = next_u64()`, rejects
//!   while `x < (2^64 - bound) mod bound`, and returns `x mod bound`.
//! * **Unit floats**: `(next_u64() >> 11) * 2^-53`.
//! * **Shuffle**: Fisher-Yates from the last index down, swapping `i` with
//!   `below(rng, i + 1)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn derive(parent: u64, label: impl AsRef<[u8]>) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_ref());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    let mut bytes = label.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend_from_slice(&index.to_le_bytes());
    derive(parent, bytes)
}

pub fn stream(seed: u64, counter: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "bound must be positive");
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let x = rng.next_u64();
        if x >= threshold {
            return x % bound;
        }
    }
}

pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}
