//! Counter-based seeded randomness with named substreams.
//!
//! Every consumer (parameter init, masking, data order, synthesis) derives its
//! own stream from the root seed plus a label and an index, so adding a new
//! consumer never shifts the draws seen by an existing one.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Real;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Reopens a stream at a given position; `counter` counts 32-bit words
    /// already consumed.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Independent child stream keyed by `(label, index)`. Does not advance `self`.
    pub fn substream(&self, label: &str, index: u64) -> RngStream {
        RngStream::new(derive_seed(self.seed, label, index))
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` exactly when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal draw rejected outside two standard deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n).map(|_| T::of(self.normal() * std)).collect()
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label bytes
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(seed ^ h) ^ splitmix64(index.wrapping_add(0x5151)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reopen_at_counter() {
        let mut a = RngStream::new(11);
        for _ in 0..13 {
            a.next_u32();
        }
        let mut b = RngStream::at(11, a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn substreams_are_isolated() {
        let root = RngStream::new(3);
        let mut m0 = root.substream("mask", 0);
        let mut m0b = root.substream("mask", 0);
        let mut m1 = root.substream("mask", 1);
        let mut d0 = root.substream("data", 0);
        let x = m0.next_u64();
        assert_eq!(x, m0b.next_u64());
        assert_ne!(x, m1.next_u64());
        assert_ne!(x, d0.next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = RngStream::new(5);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_uniform_is_exact() {
        let mut r = RngStream::new(1);
        assert_eq!(r.uniform(0.45, 0.45), 0.45);
    }
}
