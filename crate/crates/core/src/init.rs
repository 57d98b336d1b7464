use gbert_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }
}

/// Weight `fan_in × fan_out` and bias, both `U(±1/√fan_in)`.
pub fn affine(init: &mut Init, fan_in: usize, fan_out: usize) -> (Tensor<f32>, Tensor<f32>) {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (
        init.uniform(&[fan_in, fan_out], bound),
        init.uniform(&[fan_out], bound),
    )
}

pub fn linear(init: &mut Init, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    init.uniform(&[fan_in, fan_out], bound)
}

pub fn ones(d: usize) -> Tensor<f32> {
    Tensor::ones(&[d])
}

pub fn zeros(d: usize) -> Tensor<f32> {
    Tensor::zeros(&[d])
}
