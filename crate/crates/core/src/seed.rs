//! Seed derivation.
//!
//! Every stage of a run draws its randomness from `derive(root, stage, index)`:
//! the stage name is hashed with FNV-1a, mixed with the root seed and the
//! index, and passed through the SplitMix64 finalizer. Streams for distinct
//! `(stage, index)` pairs are therefore independent of evaluation order.

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for `stage` (e.g. `"phantom"`, `"bootstrap"`) and item `index`.
pub fn derive(root: u64, stage: &str, index: u64) -> u64 {
    mix64(mix64(root ^ fnv1a(stage)).wrapping_add(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams() {
        let a = derive(7, "phantom", 0);
        assert_eq!(a, derive(7, "phantom", 0));
        assert_ne!(a, derive(7, "phantom", 1));
        assert_ne!(a, derive(7, "train", 0));
        assert_ne!(a, derive(8, "phantom", 0));
    }
}
