#![allow(dead_code)]

use dhag_core::config::{stream_rng, Stream};
use dhag_core::model::{ArchConfig, Architecture, DhagModel, PerturbMode};
use dhag_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn toy_model(d: usize, z: usize, l: usize, mode: PerturbMode, seed: u64) -> DhagModel {
    let arch = ArchConfig {
        latent_dim: z,
        encoder_hidden: vec![6],
        discriminator_hidden: vec![5],
        perturbator_hidden: vec![7, 7],
        ..ArchConfig::default()
    };
    let arch = Architecture::new(d, &arch, l, mode).unwrap();
    DhagModel::new(arch, &mut stream_rng(seed, Stream::Init)).unwrap()
}

pub fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Eval);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Gives every bias a small random value so no pre-activation sits exactly on
/// a relu kink (zero-initialized biases make that likely for dead inputs).
pub fn jitter_biases(model: &mut DhagModel, seed: u64) {
    use dhag_core::nn::Module;
    let mut rng = stream_rng(seed, Stream::Eval);
    let names = model.parameter_names();
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        if name.ends_with("bias") {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
}
