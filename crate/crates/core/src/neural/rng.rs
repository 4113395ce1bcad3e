use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Deterministic generator for initialization and noise draws.
///
/// Normal variates use the Box-Muller transform over the underlying uniform
/// stream, so sequences are reproducible from the seed alone.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent generator for a named sub-stream of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.uniform_range(-bound, bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(5);
        let mut b = SeededRng::new(5);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = SeededRng::new(5);
        let mut b = SeededRng::new(6);
        let xs: Vec<f64> = (0..10).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..10).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = SeededRng::stream(5, 1);
        let mut b = SeededRng::stream(5, 2);
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::new(2024);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SeededRng::new(1);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
