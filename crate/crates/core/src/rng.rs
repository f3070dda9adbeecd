//! Deterministic pseudo-random generator (xoshiro256++ seeded via splitmix64).
//!
//! Training, mining, and the synthetic generator all draw from this one
//! generator type so that a fixed seed reproduces every run bit for bit,
//! independent of platform or external crate versions.

use alloc::vec::Vec;

/// xoshiro256++ stream with a splitmix64-expanded seed.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        Rng { state }
    }

    /// Derives an independent stream, e.g. one per epoch or per component.
    pub fn fork(&mut self, tag: u64) -> Rng {
        Rng::new(self.next_u64() ^ tag.wrapping_mul(0x9E3779B97F4A7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, bound)`; `bound` must be nonzero.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        // Lemire-style rejection to avoid modulo bias.
        let bound = bound as u64;
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// Samples `k` distinct elements without replacement, preserving no
    /// particular order. Returns fewer than `k` when the pool is smaller.
    pub fn sample_without_replacement<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        let mut scratch: Vec<T> = pool.to_vec();
        let take = k.min(scratch.len());
        for i in 0..take {
            let j = i + self.next_below(scratch.len() - i);
            scratch.swap(i, j);
        }
        scratch.truncate(take);
        scratch
    }

    /// Draws an index from a (not necessarily normalized) weight vector.
    pub fn next_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut r = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            r -= w;
            if r < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn next_below_stays_in_bounds() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            assert!(rng.next_below(7) < 7);
        }
    }

    #[test]
    fn sample_without_replacement_is_distinct() {
        let mut rng = Rng::new(11);
        let pool: Vec<usize> = (0..20).collect();
        let sample = rng.sample_without_replacement(&pool, 10);
        assert_eq!(sample.len(), 10);
        let mut seen = sample.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn sample_larger_than_pool_returns_pool() {
        let mut rng = Rng::new(5);
        let sample = rng.sample_without_replacement(&[1, 2, 3], 10);
        assert_eq!(sample.len(), 3);
    }

    #[test]
    fn next_f64_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
