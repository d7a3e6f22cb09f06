use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-addressed random stream.
///
/// A `(seed, position)` pair fully determines every subsequent draw, which is
/// what lets dropout masks be regenerated during reconstruction instead of
/// being stored.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream positioned at `position` (in 32-bit words).
    pub fn at(seed: u64, position: u128) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(position);
        s
    }

    /// Independent sub-stream `stream` of the same seed.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_stream(stream);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }
}
