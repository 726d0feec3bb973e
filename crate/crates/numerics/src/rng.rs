//! Counter-based random stream.
//!
//! The generator is SplitMix64 evaluated in counter mode: draw number `c`
//! (starting at 1) of stream `seed` is `mix64(seed + c * 0x9E3779B97F4A7C15)`
//! with Steele/Lea/Flood's `mix64` finalizer. This is exactly the output
//! sequence of the reference SplitMix64 seeded with `seed`, so `(seed,
//! counter)` pins every integer draw on every platform.
//!
//! Derived draws:
//! - uniform `[0, 1)`: top 53 bits of one draw times `2^-53`;
//! - standard normal: Box–Muller cosine branch over two uniforms
//!   (`u1` mapped to `(0, 1]`), consuming two draws;
//! - bounded integer: Lemire multiply-shift with rejection (unbiased);
//! - permutation: Fisher–Yates from the last position down.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// An independent stream derived from this stream's seed and `stream`.
    /// Does not advance `self`.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_splitmix64() {
        // Reference SplitMix64 with seed 1234567 (Vigna's splitmix64.c).
        let mut state: u64 = 1234567;
        let mut reference = || {
            state = state.wrapping_add(GOLDEN);
            mix64(state)
        };
        let mut rng = RngState::new(1234567);
        for _ in 0..16 {
            assert_eq!(rng.next_u64(), reference());
        }
        assert_eq!(RngState::new(1234567).next_u64(), 6457827717110365317);
    }

    #[test]
    fn equal_states_give_equal_draws() {
        let mut a = RngState { seed: 9, counter: 41 };
        let mut b = a;
        assert_eq!(a.permutation(50), b.permutation(50));
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = RngState::new(3);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngState::new(11);
        let xs = rng.normal_vec(200_000, 1.0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn split_streams_differ() {
        let root = RngState::new(5);
        assert_ne!(root.split(0).next_u64(), root.split(1).next_u64());
        assert_eq!(root.split(7), root.split(7));
    }
}
