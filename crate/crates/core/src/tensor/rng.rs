use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Seeded pseudo-random stream. Identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// splitmix64 finalizer, used to derive independent child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator for sub-task `key`, independent of how much of this
    /// stream has been consumed.
    pub fn derive(&self, key: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(key)))
    }

    /// Samples of `N(0, std²)` shaped as `dims`.
    pub fn gaussian<T: Real>(&mut self, std: f64, dims: [usize; 4]) -> Result<Tensor4<T>> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::arg(format!("gaussian std must be positive, got {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
        let len = dims.iter().product();
        let data = (0..len).map(|_| T::cast(normal.sample(&mut self.inner))).collect();
        Tensor4::from_vec(dims, data)
    }

    /// Discrete uniform samples on `[lo, hi]` shaped as `dims`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64, dims: [usize; 4]) -> Result<Tensor4<f64>> {
        if lo > hi {
            return Err(Error::arg(format!("empty integer range [{lo}, {hi}]")));
        }
        let len = dims.iter().product();
        let data = (0..len).map(|_| self.inner.random_range(lo..=hi) as f64).collect();
        Tensor4::from_vec(dims, data)
    }

    /// Fills `out` with uniform bytes on `[0, 255]`.
    pub fn fill_bytes_uniform(&mut self, out: &mut [u8]) {
        for b in out {
            *b = self.inner.random();
        }
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_bool(p.clamp(0.0, 1.0))
    }

    pub fn uniform01(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}
