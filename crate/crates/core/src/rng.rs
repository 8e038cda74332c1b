//! Seeded random number generation.
//!
//! Everything stochastic in the crate goes through a ChaCha stream cipher
//! seeded from a `u64`, so runs are bit-reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.inner.gen::<f64>().max(1e-300);
        let u2: f64 = self.inner.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal(0, sigma) resampled until |v| <= 2 sigma.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let v = self.normal() * sigma;
            if v.abs() <= 2.0 * sigma {
                return v;
            }
        }
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(rows, cols, |_, _| {
            T::from(self.uniform(lo, hi)).expect("uniform sample representable")
        })
    }

    pub fn uniform_vector(&mut self, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let data: Vec<f64> = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::from_vec(vec![n], data).expect("finite by construction")
    }

    pub fn trunc_normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| self.trunc_normal(sigma))
    }

    /// A random permutation of 0..n (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}
