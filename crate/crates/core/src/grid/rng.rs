//! Seeded, platform-stable sampling.
//!
//! Streams come from ChaCha8 (`rand_chacha`), a counter-based generator whose
//! output is fixed by its specification, so identical seeds give identical
//! sequences on every platform. Sub-streams for independent samples are keyed
//! by a SplitMix64 hash of `(seed, index)`, which lets parallel and serial
//! generation agree bitwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{numel, Grid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    /// Standard normal, N(0, 1).
    Normal,
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent sub-stream of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x6A09_E667_F3BC_C909)))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent generator for sub-stream `index`; does not advance `self`.
    pub fn derive(&self, index: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn sample(&mut self, dist: Distribution, shape: &[usize]) -> Result<Grid> {
        let n = numel(shape);
        if n == 0 || shape.is_empty() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "cannot sample an empty grid".into(),
            });
        }
        let data = match dist {
            Distribution::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::invalid(format!("uniform bounds ({lo}, {hi}) invalid")));
                }
                (0..n).map(|_| self.uniform(lo, hi)).collect()
            }
            Distribution::Normal => (0..n).map(|_| self.normal()).collect(),
        };
        Ok(Grid::from_parts(shape.to_vec(), data))
    }
}
