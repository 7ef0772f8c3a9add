//! Shared fixtures for the criterion benchmarks under `benches/`.

use fcnbnl_core::data::{generate_synthetic_dataset, Image, SynthConfig};
use fcnbnl_core::{DescriptorGrid, DescriptorSet, FcnModel, FcnTopology, MultiScaleDescriptors};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// First image of the default synthetic dataset.
pub fn sample_image() -> Image {
    let data = generate_synthetic_dataset(&SynthConfig {
        images_per_class: 1,
        ..SynthConfig::default()
    })
    .expect("default synth config is valid");
    data.items()[0].image.clone()
}

/// Default topology at random initialization.
pub fn random_model(seed: u64) -> FcnModel {
    FcnModel::init(FcnTopology::default(), &mut rng(seed)).expect("default topology is valid")
}

/// `n` unit-norm Gaussian descriptors.
pub fn unit_descriptors(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> DescriptorSet {
    let rows = (0..n).map(|_| {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
    });
    DescriptorSet::from_rows(dim, rows).expect("rows have the right length")
}

/// The 5x5 + 6x6 + 7x7 grid layout of a 110-descriptor image.
pub fn multiscale_110(rng: &mut ChaCha8Rng, dim: usize) -> MultiScaleDescriptors {
    let scales = [5, 6, 7]
        .iter()
        .map(|&g| DescriptorGrid::new(g, g, unit_descriptors(rng, dim, g * g)).expect("grid matches count"))
        .collect();
    MultiScaleDescriptors::new(scales).expect("scales share a dimension")
}
