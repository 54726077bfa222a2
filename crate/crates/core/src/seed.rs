//! Stable seed derivation.
//!
//! Every random stream in the simulator is a ChaCha8 generator keyed by a
//! 64-bit seed derived from a base seed and a path of tags. The mixing is
//! platform independent, so identical configs give identical streams everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with an integer component.
pub fn mix(seed: u64, value: u64) -> u64 {
    splitmix(splitmix(seed) ^ value.wrapping_mul(GOLDEN).rotate_left(17))
}

/// Combines a seed with a textual tag (FNV-1a over the bytes).
pub fn mix_str(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    mix(seed, h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_is_stable_and_spreads() {
        assert_eq!(mix(1, 2), mix(1, 2));
        assert_ne!(mix(1, 2), mix(2, 1));
        assert_ne!(mix_str(7, "init"), mix_str(7, "partition"));
        // Frozen value guards against accidental changes to the mixer.
        assert_eq!(splitmix(0), 0xE220_A839_7B1D_CDAF);
    }
}
