//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, draw index)`:
//!
//! * the uniform source is ChaCha8 keyed by `seed` (expanded through
//!   `SeedableRng::seed_from_u64`) with the ChaCha stream id set to the
//!   purpose stream, so each 64-bit word has a fixed position in the keystream;
//! * `uniform()` consumes one 64-bit word `w` and returns `((w >> 11) + 1) * 2^-53`,
//!   a value in `(0, 1]`;
//! * `gaussian()` uses Box–Muller on consecutive uniform pairs `(u1, u2)`:
//!   `r = sqrt(-2 ln u1)`, `θ = 2π u2`, yielding `r cos θ` then `r sin θ`.
//!   Gaussian draw `i` therefore always uses uniform words `2⌊i/2⌋` and
//!   `2⌊i/2⌋ + 1` of a fresh stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{Float, Tensor};

/// Purpose-split stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DataGen = 0,
    Init = 1,
    TrainNoise = 2,
    SampleNoise = 3,
}

#[derive(Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl std::fmt::Debug for Rng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rng")
            .field("seed", &self.seed)
            .field("stream", &self.stream)
            .field("word_pos", &self.inner.get_word_pos())
            .finish()
    }
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)` (up to the closed upper end of `uniform`).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (1.0 - self.uniform())
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((1.0 - self.uniform()) * n as f64).floor().min((n - 1) as f64) as usize
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() <= p
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_tensor<F: Float>(&mut self, shape: &[usize]) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::of(self.gaussian()))
    }

    pub fn uniform_tensor<F: Float>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::of(self.uniform_range(lo, hi)))
    }
}
