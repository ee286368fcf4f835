//! Shared numeric utilities: reference special functions, seeded RNG
//! helpers, and a dense linear solver for the fitting code.

pub mod linalg;
pub mod rng;
pub mod special;

/// FNV-1a over bytes; used for stable config/dataset identity hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
