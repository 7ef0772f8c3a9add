//! Scoring expressed as a stack of generic layers: prototypes act as the
//! filters of a 1x1 convolution, followed by ReLU, `pow[q]`, an all-ones
//! grouped sum over each class's prototypes and `pow[1/q]`. Used to
//! cross-check the direct scoring path.

use super::bank::PrototypeBank;
use crate::descriptors::{DescriptorGrid, MultiScaleDescriptors};
use crate::error::Result;
use crate::numerics::{conv2d, group_sum_channels, pow_elem, relu, Tensor};

/// Converts a descriptor grid to a `D x rows x cols` feature map.
pub fn grid_to_tensor(grid: &DescriptorGrid) -> Tensor {
    let dim = grid.descriptors.dim();
    let n = grid.eta();
    let mut data = vec![0.0; dim * n];
    for (i, z) in grid.descriptors.iter().enumerate() {
        for (d, &v) in z.iter().enumerate() {
            data[d * n + i] = v;
        }
    }
    Tensor::new(vec![dim, grid.rows, grid.cols], data).expect("grid dims are consistent")
}

/// `k x rows x cols` map of per-cell class scores.
pub fn omega_map(grid: &DescriptorGrid, bank: &PrototypeBank) -> Result<Tensor> {
    let cfg = bank.config();
    let filters = Tensor::new(
        vec![cfg.classes * cfg.prototypes_per_class, bank.dim(), 1, 1],
        bank.weights().to_vec(),
    )?;
    let dots = conv2d(&grid_to_tensor(grid), &filters, None, 1)?;
    let powered = pow_elem(&relu(&dots), cfg.q)?;
    let grouped = group_sum_channels(&powered, cfg.prototypes_per_class)?;
    pow_elem(&grouped, 1.0 / cfg.q)
}

/// Likelihoods via spatial averaging of [`omega_map`] and a mean over scales.
pub fn likelihoods_via_blocks(descriptors: &MultiScaleDescriptors, bank: &PrototypeBank) -> Result<Vec<f64>> {
    let k = bank.classes();
    let mut total = vec![0.0; k];
    for grid in &descriptors.scales {
        let map = omega_map(grid, bank)?;
        let plane = grid.eta();
        for (t, channel) in total.iter_mut().zip(map.data().chunks(plane)) {
            *t += channel.iter().sum::<f64>() / plane as f64;
        }
    }
    let m = descriptors.scales.len() as f64;
    Ok(total.into_iter().map(|t| t / m).collect())
}
