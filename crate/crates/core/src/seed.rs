//! Deterministic seed derivation.

/// Mixes a master seed with a stream index (splitmix64 finalizer), so
/// per-item generators are independent of iteration order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level derivation for `(seed, a, b)`.
pub fn derive_seed2(seed: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(seed, a), b)
}
