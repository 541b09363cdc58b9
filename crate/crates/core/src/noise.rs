//! Seeded randomness shared by every stochastic path.
//!
//! One `NoiseSource` is one ChaCha8 stream. The full generator state (seed,
//! stream id and word position) round-trips through [`NoiseState`], which is
//! what checkpoints store for bit-exact resume.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::DenseMatrix;

/// Open-interval clamp applied to uniforms before the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Gumbel,
    Bernoulli(f64),
    Uniform,
    StandardNormal,
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream keyed by `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Draws a fresh seed from this stream and returns a child source.
    pub fn fork(&mut self) -> Self {
        Self::new(self.rng.next_u64())
    }

    pub fn state(&self) -> NoiseState {
        NoiseState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: NoiseState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard Gumbel draw `-ln(-ln u)` with `u` clamped into the open unit interval.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }

    pub fn draw(&mut self, dist: Distribution) -> f64 {
        match dist {
            Distribution::Gumbel => self.gumbel(),
            Distribution::Bernoulli(p) => {
                if self.bernoulli(p) {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Uniform => self.uniform(),
            Distribution::StandardNormal => self.normal(),
        }
    }

    /// Fills a `rows x cols` matrix in row-major order.
    pub fn sample(&mut self, dist: Distribution, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| self.draw(dist))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Gumbel noise for a `rows x cols` mask.
pub fn sample_gumbel(noise: &mut NoiseSource, rows: usize, cols: usize) -> DenseMatrix {
    noise.sample(Distribution::Gumbel, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_transform_fixed_point() {
        let g = gumbel_from_uniform((-1.0f64).exp());
        assert!(g.abs() < 1e-15, "{g}");
    }

    #[test]
    fn gumbel_is_finite_at_the_edges() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn same_seed_same_stream() {
        let a = sample_gumbel(&mut NoiseSource::new(11), 4, 5);
        let b = sample_gumbel(&mut NoiseSource::new(11), 4, 5);
        assert_eq!(a, b);
        let c = sample_gumbel(&mut NoiseSource::new(12), 4, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn gumbel_mean_matches_euler_mascheroni() {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        let g = sample_gumbel(&mut NoiseSource::new(3), 1000, 100);
        let mean = g.sum() / 1e5;
        assert!((mean - EULER_GAMMA).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = NoiseSource::new(5);
        for _ in 0..37 {
            a.uniform();
        }
        let mut b = NoiseSource::from_state(a.state());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = NoiseSource::with_stream(1, 0);
        let mut b = NoiseSource::with_stream(1, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
