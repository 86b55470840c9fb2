//! Deterministic pseudo-random numbers.
//!
//! xoshiro256++ seeded through splitmix64, implemented here rather than pulled
//! from a crate so the bit stream is pinned independently of dependency
//! versions. Identical seeds give identical streams on every platform, which
//! the reproducibility tests rely on (byte-identical training logs,
//! checkpoint resume).
//!
//! References: Blackman & Vigna, "Scrambled linear pseudorandom number
//! generators" (xoshiro256++), and Steele et al. (splitmix64).

/// xoshiro256++ generator with splitmix64 seeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { state }
    }

    /// Derive an independent stream for `index` under the same root seed.
    /// Pure function of (seed, index); used for per-sample dataset generation.
    pub fn for_stream(seed: u64, index: u64) -> Self {
        let mut sm = seed ^ index.wrapping_mul(0xd1342543de82ef95);
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { state }
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

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) via rejection sampling (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (one value per call; the paired value
    /// is discarded to keep the stream position a simple function of calls).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for v in out.iter_mut() {
            *v = mean + std * self.normal();
        }
    }

    pub fn fill_uniform(&mut self, out: &mut [f64], lo: f64, hi: f64) {
        for v in out.iter_mut() {
            *v = self.uniform(lo, hi);
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Raw generator words, for checkpointing.
    pub fn state_words(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state_words(words: [u64; 4]) -> Self {
        Rng { state: words }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 4);
    }

    // Reference values for xoshiro256++ seeded via splitmix64(0), as produced
    // by the published C implementations; pins the bit stream forever.
    #[test]
    fn matches_reference_stream() {
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0x53175d61490b23df);
        assert_eq!(r.next_u64(), 0x61da6f3dc380d507);
        assert_eq!(r.next_u64(), 0x5c0fdf91ec9a7bfc);
    }

    #[test]
    fn uniform_is_in_range() {
        let mut r = Rng::new(7);
        for _ in 0..1000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut r = Rng::new(9);
        let mut counts = [0usize; 5];
        for _ in 0..5000 {
            counts[r.below(5)] += 1;
        }
        for &c in &counts {
            assert!((800..1200).contains(&c), "count {c} out of band");
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = Rng::new(11);
        let n = 20000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = r.normal();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn state_words_round_trip() {
        let mut r = Rng::new(123);
        r.next_u64();
        let words = r.state_words();
        let mut s = Rng::from_state_words(words);
        assert_eq!(r.next_u64(), s.next_u64());
    }

    #[test]
    fn stream_derivation_is_pure() {
        let a = Rng::for_stream(5, 10);
        let b = Rng::for_stream(5, 10);
        assert_eq!(a, b);
        let c = Rng::for_stream(5, 11);
        assert_ne!(a, c);
    }
}
