//! Deterministic random number generation.
//!
//! Everything random in this crate flows through [`Rng`], a SplitMix64
//! generator. The constants are spelled out below so the value stream can be
//! reproduced in any language from the seed alone; identical seeds yield
//! identical streams on every platform.

/// SplitMix64 generator: 64-bit state advanced by the golden-ratio increment,
/// output mixed by two xor-shift-multiply rounds.
///
/// Constants (Steele, Lea & Flood's published parameters):
/// - increment `0x9E3779B97F4A7C15`
/// - mix multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const INCREMENT: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 output mix, also used standalone to derive stream seeds.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent stream for sub-task `stream` of a run seeded with `seed`.
    ///
    /// Derived as `mix(seed ^ mix(stream + 1))`, so stream 0 differs from the
    /// root generator and distinct indices give uncorrelated streams.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::new(mix(seed ^ mix(stream.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(INCREMENT);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution (exact as f32).
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / 16_777_216.0
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in `[0, n)` via the fixed-point multiply method.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() >> 32) * n as u64) >> 32) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = (self.next_f32() as f64).max(1e-12);
        let u2 = self.next_f32() as f64;
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(17);
        let mut b = Rng::new(17);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut root = Rng::new(5);
        let mut s0 = Rng::derive(5, 0);
        let mut s1 = Rng::derive(5, 1);
        let a: Vec<u64> = (0..8).map(|_| root.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| s0.next_u64()).collect();
        let c: Vec<u64> = (0..8).map(|_| s1.next_u64()).collect();
        assert_ne!(a, b);
        assert_ne!(b, c);
    }

    #[test]
    fn next_f32_in_unit_interval() {
        let mut r = Rng::new(99);
        for _ in 0..10_000 {
            let x = r.next_f32();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut r = Rng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
