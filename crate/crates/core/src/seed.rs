//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of small integers
//! (run seed, step, layer, sample, role, ...). The key is folded with the
//! SplitMix64 finalizer:
//!
//! ```text
//! h = base
//! for part in parts: h = mix64(h ^ mix64(part + 0x9E3779B97F4A7C15))
//! ```
//!
//! where `mix64` is the SplitMix64 output function. The construction only
//! uses wrapping 64-bit integer arithmetic, so the derived seeds are the same
//! on every platform and in every language that reimplements it.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `parts` into `base`. Order matters.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(base), |h, &p| mix64(h ^ mix64(p.wrapping_add(GOLDEN))))
}
