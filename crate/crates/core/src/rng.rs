//! Seed derivation and named random streams.
//!
//! Every stochastic consumer gets its own ChaCha stream derived by hashing
//! (master seed, label). Streams never alias, so adding or removing one
//! consumer cannot shift the draws of another.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Hash (master seed, label) into a 32-byte ChaCha seed.
fn digest(master_seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// Derive a child seed for handing to a component that seeds itself.
/// Masked to 63 bits so seeds survive TOML round-trips (TOML integers are i64).
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let d = digest(master_seed, label);
    u64::from_le_bytes(d[..8].try_into().unwrap()) & (i64::MAX as u64)
}

/// Derive an independent random stream for the given component label.
pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(master_seed, label))
}

/// Hex SHA-256 of a byte slice. Used to fingerprint batches and input files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
