//! Counter-based random streams.
//!
//! A [`RandomStream`] is addressed by `(seed, stream_id, counter)`. The
//! keystream is ChaCha8 keyed by the seed with the stream id as nonce, so
//! streams with distinct ids never overlap and the value at any counter
//! position can be reproduced without replaying earlier draws.
//!
//! The counter counts 64-bit words. Every standard normal consumes exactly
//! two words (one Box–Muller pair, cosine branch only) and every uniform
//! consumes one, so `draw_gaussian(n)` advances the counter by `2n`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::mat::Mat;

/// Stream-id namespaces for the different consumers of randomness. Each
/// namespace owns 2⁴⁰ consecutive ids, so [`stream_id`] is injective.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const GENERATOR_NOISE: u64 = 2;
    pub const PARTICLE: u64 = 3;
    pub const CRITIC: u64 = 4;
    pub const REFERENCE: u64 = 5;
    pub const EVALUATION: u64 = 6;
    pub const DATA: u64 = 7;
    pub const STUDENT_NOISE: u64 = 8;
    pub const PARAM_INIT: u64 = 9;
}

/// Composes a namespace tag and an index into a stream id.
pub fn stream_id(tag: u64, index: u64) -> u64 {
    assert!(index < (1 << 40), "stream index out of range");
    (tag << 40) | index
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// A stream positioned at `counter` words.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(u128::from(counter) * 2);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        (self.rng.get_word_pos() / 2) as u64
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn draw_gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    pub fn draw_uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// `rows × cols` standard normals, filled row by row.
    pub fn gaussian_mat(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, self.draw_gaussian(rows * cols))
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// A fresh stream sharing this seed.
    pub fn fork(&self, stream_id: u64) -> RandomStream {
        RandomStream::new(self.seed, stream_id)
    }
}

/// Free-function form of [`RandomStream::draw_gaussian`].
pub fn draw_gaussian(stream: &mut RandomStream, n: usize) -> Vec<f64> {
    stream.draw_gaussian(n)
}

/// One stream per particle: `stream_id(tag, first + i)` for `i in 0..n`.
pub fn particle_streams(seed: u64, tag: u64, first: u64, n: usize) -> Vec<RandomStream> {
    (0..n as u64).map(|i| RandomStream::new(seed, stream_id(tag, first + i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_draw() {
        let mut s = RandomStream::new(7, 0);
        assert!(s.draw_gaussian(0).is_empty());
        assert_eq!(s.counter(), 0);
    }

    #[test]
    fn fresh_streams_repeat() {
        let a = RandomStream::new(7, 0).draw_gaussian(4);
        let b = RandomStream::new(7, 0).draw_gaussian(4);
        assert_eq!(a, b);
        assert_ne!(a, RandomStream::new(7, 1).draw_gaussian(4));
        assert_ne!(a, RandomStream::new(8, 0).draw_gaussian(4));
    }

    #[test]
    fn counter_advances_two_words_per_normal_and_is_seekable() {
        let mut s = RandomStream::new(3, 11);
        let first = s.draw_gaussian(5);
        assert_eq!(s.counter(), 10);
        let rest = s.draw_gaussian(3);
        let mut jumped = RandomStream::at(3, 11, 10);
        assert_eq!(jumped.draw_gaussian(3), rest);
        // Splitting a draw does not change the sequence.
        let mut t = RandomStream::new(3, 11);
        let mut joined = t.draw_gaussian(2);
        joined.extend(t.draw_gaussian(3));
        assert_eq!(joined, first);
    }

    #[test]
    fn gaussian_moments() {
        let xs = RandomStream::new(2024, 5).draw_gaussian(100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn stream_ids_are_injective_across_tags() {
        assert_ne!(stream_id(tags::PARTICLE, 0), stream_id(tags::INIT, 0));
        assert_eq!(stream_id(1, 5), (1 << 40) + 5);
    }
}
