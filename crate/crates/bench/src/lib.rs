//! Fixtures shared by the benchmarks.

use fourierformer_core::numerics::{Rng, Tensor};

/// Random `(q, k, v)` for an `n × d` attention call with `d`-wide values.
pub fn qkv(n: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    (rng.normal_tensor(&[n, d], 0.5), rng.normal_tensor(&[n, d], 0.5), rng.normal_tensor(&[n, d], 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let (q, k, v) = qkv(5, 3, 1);
        assert_eq!((q.shape(), k.shape(), v.shape()), (&[5usize, 3][..], &[5usize, 3][..], &[5usize, 3][..]));
    }
}
