//! Shared fixtures for the criterion benches.

use vafa_core::rng::Rng;
use vafa_core::tensor::Tensor;
use vafa_core::volume::Volume;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.next_f64()).collect())
}

pub fn random_volume(seed: u64, side: usize) -> Volume {
    Volume::from_tensor(random_tensor(seed, &[side, side, side])).unwrap()
}
