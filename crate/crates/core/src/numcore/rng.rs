use rand::distr::{Distribution, Open01};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Which distribution [`Rng::sample`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    StandardNormal,
    Uniform,
    Gumbel,
}

/// Seeded ChaCha stream. `derive(seed, stream)` gives independent,
/// reproducible substreams, e.g. one per dataset sample or per restart.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Child stream keyed by a draw from this one.
    pub fn split(&mut self, stream: u64) -> Self {
        let seed = self.inner.random::<u64>();
        Self::derive(seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        Open01.sample(&mut self.inner)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// `-ln(-ln u)`, `u ~ U(0, 1)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn sample<T: Scalar>(&mut self, kind: SampleKind, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 {
            return Err(Error::InvalidShape {
                op: "sample",
                shape: shape.to_vec(),
            });
        }
        let data = (0..n)
            .map(|_| {
                T::of(match kind {
                    SampleKind::StandardNormal => self.normal(),
                    SampleKind::Uniform => self.uniform(),
                    SampleKind::Gumbel => self.gumbel(),
                })
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(t: &Tensor<f64>) -> f64 {
        t.sum() / t.len() as f64
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let a1: Tensor<f64> = a.sample(SampleKind::StandardNormal, &[8]).unwrap();
        let a2: Tensor<f64> = a.sample(SampleKind::StandardNormal, &[8]).unwrap();
        let b1: Tensor<f64> = b.sample(SampleKind::StandardNormal, &[8]).unwrap();
        let b2: Tensor<f64> = b.sample(SampleKind::StandardNormal, &[8]).unwrap();
        assert_ne!(a1, a2);
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn derived_streams_differ() {
        let x = Rng::derive(7, 0).uniform();
        let y = Rng::derive(7, 1).uniform();
        assert_ne!(x, y);
        assert_eq!(x, Rng::derive(7, 0).uniform());
    }

    #[test]
    fn normal_mean() {
        let t: Tensor<f64> = Rng::new(1).sample(SampleKind::StandardNormal, &[65536]).unwrap();
        assert!(mean(&t).abs() < 0.02);
    }

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let t: Tensor<f64> = Rng::new(2).sample(SampleKind::Gumbel, &[65536]).unwrap();
        assert!((mean(&t) - 0.577_215_664_9).abs() < 0.02);
    }

    #[test]
    fn uniform_in_open_interval() {
        let t: Tensor<f64> = Rng::new(3).sample(SampleKind::Uniform, &[4096]).unwrap();
        assert!(t.data().iter().all(|&u| u > 0.0 && u < 1.0));
    }

    #[test]
    fn zero_size_shape_rejected() {
        assert!(Rng::new(0).sample::<f64>(SampleKind::Uniform, &[0]).is_err());
        assert!(Rng::new(0).sample::<f64>(SampleKind::Uniform, &[]).is_err());
    }
}
