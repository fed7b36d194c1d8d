use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Float, Tensor};

pub const RNG_ALGORITHM: &str = "chacha8";

/// Serializable position of a [`SeededRng`] stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub algorithm: String,
    /// Position in the keystream, in 32-bit words.
    pub word_pos: u128,
    /// Number of Gaussian noise tensors drawn so far.
    pub noise_draws: u64,
}

/// Deterministic generator that also counts how many noise tensors it
/// produced, so callers can audit that a code path is noise-free.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    noise_draws: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            noise_draws: 0,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng.noise_draws = state.noise_draws;
        rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            algorithm: RNG_ALGORITHM.to_string(),
            word_pos: self.inner.get_word_pos(),
            noise_draws: self.noise_draws,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_draws(&self) -> u64 {
        self.noise_draws
    }

    /// Independent child stream derived from this one.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.next_u64())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard normal noise tensor; counted by [`Self::noise_draws`].
    pub fn randn<T: Float>(&mut self, shape: &[usize]) -> Tensor<T> {
        self.noise_draws += 1;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal())).collect();
        Tensor::new(data, shape).expect("valid shape")
    }

    /// Uniform values in `[-bound, bound)`; used for weight init, not counted.
    pub fn uniform_tensor<T: Float>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.range(-bound, bound))).collect();
        Tensor::new(data, shape).expect("valid shape")
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
