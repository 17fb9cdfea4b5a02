//! splitmix64 generator and counter-based hashing.
//!
//! Weight initialization consumes a single splitmix64 stream in a fixed
//! traversal order, so the same `(config, seed)` pair yields bit-identical
//! weights in any implementation that follows the same order.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        finalize(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn next_symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.next_unit() - 1.0) * bound
    }
}

/// The splitmix64 output mixer.
pub fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

/// Stateless hash of a tuple of counters, used where a draw must not depend
/// on the order in which the caller visits the counters.
pub fn hash_counters(seed: u64, counters: &[u64]) -> u64 {
    let mut h = finalize(seed.wrapping_add(GOLDEN_GAMMA));
    for &c in counters {
        h = finalize(h ^ c.wrapping_add(GOLDEN_GAMMA));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_first_output() {
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        // Second output of the published reference sequence for seed 0.
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn unit_range() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..10_000 {
            let u = rng.next_unit();
            assert!((0.0..1.0).contains(&u));
            let s = rng.next_symmetric(0.25);
            assert!((-0.25..0.25).contains(&s));
        }
    }

    #[test]
    fn counter_hash_is_order_sensitive() {
        assert_ne!(hash_counters(1, &[1, 2]), hash_counters(1, &[2, 1]));
        assert_eq!(hash_counters(9, &[3, 4, 5]), hash_counters(9, &[3, 4, 5]));
    }
}
