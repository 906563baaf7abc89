//! Shared fixtures for the criterion benchmarks.

use heatnet_core::autodiff::ParamStore;
use heatnet_core::model::ModelSpec;
use heatnet_core::net::Classifier;
use heatnet_core::spectral::{build_decay, DecayMatrix, FrequencyGrid};
use heatnet_core::tensor::Tensor;

pub fn field(c: usize, side: usize) -> Tensor<f32> {
    Tensor::from_fn(&[1, c, side, side], |i| ((i % 13) as f32) / 13.0 - 0.5)
}

pub fn decay(c: usize, side: usize) -> DecayMatrix<f32> {
    let grid = FrequencyGrid::new(side, side);
    let k = Tensor::<f32>::full(&[c, side, side], 0.7);
    build_decay(&grid, &k, 1.0).unwrap()
}

pub fn tokens(side: usize) -> Tensor<f32> {
    Tensor::from_fn(&[side * side, 16], |i| ((i % 23) as f32) / 23.0 - 0.5)
}

pub fn attention_weights() -> [Tensor<f32>; 3] {
    [
        Tensor::from_fn(&[16, 16], |i| ((i % 7) as f32) / 70.0),
        Tensor::from_fn(&[16, 16], |i| ((i % 11) as f32) / 110.0),
        Tensor::from_fn(&[16, 16], |i| ((i % 5) as f32) / 50.0),
    ]
}

pub fn mini_model() -> (Classifier, ParamStore<f32>, Tensor<f32>, Tensor<f32>) {
    use rand::SeedableRng;
    let spec = ModelSpec::mini(4);
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let net = Classifier::build(&mut store, &mut rng, &spec).unwrap();
    let rgb = Tensor::from_fn(&[2, 1, 3, 16, 16], |i| ((i % 9) as f32) / 9.0);
    let evt = Tensor::from_fn(&[2, 1, 3, 16, 16], |i| ((i % 4) as f32) / 4.0);
    (net, store, rgb, evt)
}
