//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, index)`, so parallel samplers
//! produce the same stream regardless of scheduling. Sequential consumers
//! (k-means++, initialization, graph generation) use `ChaCha8Rng` seeded
//! through [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a stream label into an independent seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix(mix(seed.wrapping_add(GOLDEN)) ^ label.wrapping_mul(GOLDEN).rotate_left(17))
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stateless generator keyed on a seed; `uniform(i)` is the i-th draw.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { key: mix(seed ^ 0x6A09_E667_F3BC_C908) }
    }

    #[inline]
    pub fn bits(&self, index: u64) -> u64 {
        mix(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        ((self.bits(index) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gumbel draw `-ln(-ln u)`.
    #[inline]
    pub fn gumbel(&self, index: u64) -> f64 {
        let u = self.uniform(index).clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
        -(-u.ln()).ln()
    }
}

/// Tensor of i.i.d. standard Gumbel samples, element `i` drawn at index `i`.
pub fn gumbel_noise(shape: &[usize], seed: u64) -> Tensor {
    let rng = CounterRng::new(seed);
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len as u64).map(|i| rng.gumbel(i)).collect())
}
