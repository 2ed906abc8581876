//! Explicit-state generators for fault sampling.
//!
//! Sequences are fully specified by their recurrences so that any other
//! implementation can reproduce a campaign from its recorded seeds.
//!
//! `SplitMix64` (seed mixing, one output per call):
//!
//! ```text
//! s  = s + 0x9E3779B97F4A7C15
//! z  = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9
//! z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! `XorShift64Star` (sampling stream, state seeded through one SplitMix64
//! output, zero remapped to the golden-ratio constant):
//!
//! ```text
//! x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27
//! out = x * 0x2545F4914F6CDD1D
//! ```
//!
//! All multiplications wrap modulo 2^64.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output for `state`, advancing it in place.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index` within a campaign seeded with `campaign_seed`.
pub fn trial_seed(campaign_seed: u64, index: u64) -> u64 {
    let mut s = campaign_seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mixed = splitmix64(&mut s);
        Self {
            state: if mixed == 0 { GOLDEN } else { mixed },
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform value in `[0, bound)` by widening multiply (`bound > 0`).
    #[inline]
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0 (reference C implementation).
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = XorShift64Star::new(7);
        for bound in [1u64, 2, 3, 64, 1000, u64::MAX] {
            for _ in 0..1000 {
                assert!(rng.below(bound) < bound);
            }
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = {
            let mut r = XorShift64Star::new(42);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = XorShift64Star::new(42);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, {
            let mut r = XorShift64Star::new(43);
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        });
    }
}
