//! Stable hashing for seeds and content digests. Everything here must give
//! the same answer on every platform and toolchain, so it goes through
//! SHA-256 rather than `std::hash`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes a sequence of string parts with length framing so that
/// `["ab", "c"]` and `["a", "bc"]` differ.
pub fn hash_parts(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

pub fn hash_u64(parts: &[&str]) -> u64 {
    let d = hash_parts(parts);
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

/// A ChaCha RNG keyed by `seed` and a list of domain strings.
pub fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let seed_str = seed.to_string();
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(seed_str.as_str());
    all.extend_from_slice(parts);
    ChaCha8Rng::from_seed(hash_parts(&all))
}
