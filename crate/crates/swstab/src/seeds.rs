//! Deterministic seed derivation for independent random streams.

/// SplitMix64 finalizer: a cheap bijective mixer with good avalanche,
/// standard for spawning independent seeds from a base seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for an indexed sub-stream (a trial, an iteration) from a
/// base seed. Distinct `(seed, stream)` pairs map to well-separated values,
/// so sub-streams are statistically independent and the derivation is
/// reproducible across runs and platforms.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}
