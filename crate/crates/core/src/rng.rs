//! Seeded, stream-indexed random numbers.
//!
//! Every consumer (a shadow run, a client, a noise draw) derives its own
//! stream from `(seed, label)` so results never depend on scheduling order.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// An independent generator keyed by `label`. Depends only on this
    /// generator's `(seed, stream)`, never on how many values were drawn.
    pub fn derive(&self, label: u64) -> Rng {
        let child = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5851_F42D)));
        Rng::with_stream(child, splitmix64(label))
    }

    /// Derives from a string label (stage names and the like).
    pub fn derive_named(&self, label: &str) -> Rng {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01B3);
        }
        self.derive(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// A draw from the symmetric or asymmetric Dirichlet distribution.
    pub fn dirichlet(&mut self, alpha: &[f64]) -> Vec<f64> {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| {
                Gamma::new(a, 1.0)
                    .expect("dirichlet concentration must be positive")
                    .sample(&mut self.inner)
            })
            .collect();
        let total: f64 = draws.iter().sum();
        draws.iter().map(|d| d / total).collect()
    }

    pub fn gaussian(&mut self, shape: &[usize], stddev: f32) -> Tensor {
        gaussian_sample(self, shape, stddev)
    }
}

/// I.i.d. `N(0, stddev²)` entries. `stddev == 0` yields exact zeros.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], stddev: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if stddev == 0.0 {
        return t;
    }
    for x in t.data_mut() {
        *x = (rng.normal() * stddev as f64) as f32;
    }
    t
}
