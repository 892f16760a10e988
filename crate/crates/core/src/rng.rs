//! Deterministic seeded random numbers.
//!
//! SplitMix64 (Steele et al., "Fast splittable pseudorandom number
//! generators"): a 64-bit counter run through a fixed avalanche mix.
//! The stream depends only on the seed, so the same seed produces a
//! bit-identical sequence on every platform. That property is load-bearing:
//! weight init, corpus generation, batch shuffling and dropout masks all
//! have to replay exactly across runs and across execution strategies.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent stream from `seed` and a list of tags.
    ///
    /// Used to key per-site streams (e.g. the dropout mask of sentence `b`
    /// at step `t`, layer `l`) so that the mask is a pure function of
    /// (seed, site) and never of execution order or device assignment.
    pub fn for_site(seed: u64, tags: &[u64]) -> Self {
        let mut state = mix(seed ^ GOLDEN_GAMMA);
        for &t in tags {
            state = mix(state ^ t.wrapping_mul(GOLDEN_GAMMA));
        }
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in [0, n). Lemire multiply-shift reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Fisher-Yates shuffle with a fixed traversal order.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reference_values_frozen() {
        // SplitMix64 with seed 1234567 — frozen so any change to the
        // algorithm is caught rather than silently reshuffling every run.
        let mut r = Rng::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn site_derivation_is_order_sensitive() {
        let a = Rng::for_site(7, &[1, 2]).next_u64();
        let b = Rng::for_site(7, &[2, 1]).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = Rng::new(9);
        for _ in 0..1000 {
            let x = r.uniform(-0.1, 0.1);
            assert!((-0.1..0.1).contains(&x));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::new(3);
        let mut v: Vec<u32> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn below_bounds() {
        let mut r = Rng::new(11);
        for _ in 0..1000 {
            assert!(r.below(7) < 7);
        }
    }
}
