use super::bank::PrototypeBank;
use super::score::{omega_backward_into, omega_unchecked};
use crate::descriptors::{DescriptorSet, MultiScaleDescriptors};
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, softmax};

/// Soft-max log-loss `-u_y + log sum_c exp(u_c)`.
pub fn descriptor_loss(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    Ok(logsumexp(scores)? - scores[label])
}

/// Loss value and its gradient `softmax(u) - e_y` with respect to the scores.
pub fn descriptor_loss_grad(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = descriptor_loss(scores, label)?;
    let mut grad = softmax(scores)?;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Value and exact gradients of the descriptor-averaged (Jensen) upper
/// bound on the image log-loss.
#[derive(Clone, Debug)]
pub struct SurrogateLoss {
    pub value: f64,
    /// Same layout as [`PrototypeBank::weights`].
    pub grad_prototypes: Vec<f64>,
    /// One entry per scale, matching the input grids.
    pub grad_descriptors: Vec<DescriptorSet>,
}

/// `(1/m) sum_scales (1/eta) sum_z loss(omega(z, W), y)`: every descriptor
/// acts as a training sample weighted by the inverse size of its scale.
pub fn surrogate_loss(
    descriptors: &MultiScaleDescriptors,
    bank: &PrototypeBank,
    label: usize,
) -> Result<SurrogateLoss> {
    let k = bank.classes();
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
    }
    if descriptors.dim() != bank.dim() {
        return Err(Error::shape(
            "surrogate_loss",
            format!(
                "descriptor dimension {} vs prototype dimension {}",
                descriptors.dim(),
                bank.dim()
            ),
        ));
    }
    let q = bank.config().q;
    let dim = bank.dim();
    let m = descriptors.scales.len() as f64;
    let mut value = 0.0;
    let mut grad_prototypes = vec![0.0; bank.weights().len()];
    let mut grad_descriptors = Vec::with_capacity(descriptors.scales.len());
    let block = bank.config().prototypes_per_class * dim;
    let mut scores = vec![0.0; k];
    for grid in &descriptors.scales {
        let weight = 1.0 / (m * grid.eta() as f64);
        let mut grad_scale = vec![0.0; grid.descriptors.as_slice().len()];
        for (z, gz) in grid.descriptors.iter().zip(grad_scale.chunks_mut(dim)) {
            for (c, u) in scores.iter_mut().enumerate() {
                *u = omega_unchecked(z, bank.class_prototypes(c), q);
            }
            let (loss, grad_u) = descriptor_loss_grad(&scores, label)?;
            value += weight * loss;
            for (c, g) in grad_u.iter().enumerate() {
                omega_backward_into(
                    z,
                    bank.class_prototypes(c),
                    q,
                    weight * g,
                    gz,
                    &mut grad_prototypes[c * block..(c + 1) * block],
                );
            }
        }
        grad_descriptors.push(DescriptorSet::new(dim, grad_scale)?);
    }
    Ok(SurrogateLoss {
        value,
        grad_prototypes,
        grad_descriptors,
    })
}

/// Image-level loss `loss(h(x; W), y)` that the surrogate bounds from above.
pub fn image_loss(descriptors: &MultiScaleDescriptors, bank: &PrototypeBank, label: usize) -> Result<f64> {
    descriptor_loss(&super::likelihoods(descriptors, bank)?, label)
}
