//! Deterministic random numbers.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator: a `(seed,
//! stream)` pair addresses an independent keystream, so workers can draw
//! non-overlapping substreams without coordination.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for worker / replicate `id`. Substreams depend
    /// only on `(seed, id)`, never on how much of the parent was consumed.
    pub fn substream(&self, id: u64) -> Rng {
        // Stream 0 is the parent itself; mix the parent's stream in so nested
        // substreams do not collide with siblings.
        let stream = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(id)
            .wrapping_add(1);
        Self::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Matrix of i.i.d. `U(lo, hi)` entries.
    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], sigma: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| sigma * self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// `n` i.i.d. rows from the isotropic Gaussian `N(mean, sigma² I)`.
pub fn gaussian_sample(rng: &mut Rng, mean: &[f64], sigma: f64, n: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let d = mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for &m in mean {
            data.push(m + sigma * rng.normal());
        }
    }
    Tensor::new(vec![n, d], data)
}
