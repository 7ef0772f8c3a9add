use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::topology::FcnTopology;
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameters of the extractor plus the per-layer trainable mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnModel {
    topology: FcnTopology,
    pub convs: Vec<ConvParams>,
    pub batch_norm: Option<BatchNormState>,
    trainable: Vec<bool>,
    batch_norm_trainable: bool,
}

impl FcnModel {
    /// He-normal weights and zero biases; every layer trainable.
    pub fn init(topology: FcnTopology, rng: &mut impl Rng) -> Result<Self> {
        topology.validate()?;
        let convs = topology
            .conv_specs()
            .iter()
            .map(|spec| {
                let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let dims = spec.weight_dims();
                let n: usize = dims.iter().product();
                ConvParams {
                    weights: Tensor::new(dims, (0..n).map(|_| normal.sample(rng)).collect()).expect("dims match"),
                    bias: Tensor::zeros(vec![spec.out_channels]),
                }
            })
            .collect();
        Self::from_parts(topology, convs, None)
    }

    /// Assembles a model from explicit parameters, validating every shape.
    pub fn from_parts(
        topology: FcnTopology,
        convs: Vec<ConvParams>,
        batch_norm: Option<BatchNormState>,
    ) -> Result<Self> {
        topology.validate()?;
        let specs = topology.conv_specs();
        if convs.len() != specs.len() {
            return Err(Error::shape(
                "fcn model",
                format!("{} parameter sets for {} layers", convs.len(), specs.len()),
            ));
        }
        for (i, (spec, p)) in specs.iter().zip(&convs).enumerate() {
            if p.weights.dims() != spec.weight_dims() || p.bias.dims() != [spec.out_channels] {
                return Err(Error::shape(
                    "fcn model",
                    format!(
                        "layer {i}: weights {:?} / bias {:?}, expected {:?} / [{}]",
                        p.weights.dims(),
                        p.bias.dims(),
                        spec.weight_dims(),
                        spec.out_channels
                    ),
                ));
            }
        }
        let dim = topology.descriptor_dim();
        let batch_norm = match (topology.batch_norm_before_head, batch_norm) {
            (false, _) => None,
            (true, None) => Some(BatchNormState::new(dim)),
            (true, Some(state)) if state.dim() == dim => Some(state),
            (true, Some(state)) => {
                return Err(Error::shape(
                    "fcn model",
                    format!("batch norm of width {} for descriptors of dimension {dim}", state.dim()),
                ))
            }
        };
        let layers = convs.len();
        Ok(FcnModel {
            topology,
            convs,
            batch_norm,
            trainable: vec![true; layers],
            batch_norm_trainable: true,
        })
    }

    pub fn topology(&self) -> &FcnTopology {
        &self.topology
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn batch_norm_trainable(&self) -> bool {
        self.batch_norm_trainable && self.batch_norm.is_some()
    }

    pub fn any_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t) || self.batch_norm_trainable()
    }

    /// Only the last `n` convolutions (and the batch-norm affine parameters
    /// when `n > 0`) receive gradients.
    pub fn set_fine_tune_last(&mut self, n: usize) {
        let layers = self.trainable.len();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = i + n >= layers;
        }
        self.batch_norm_trainable = n > 0;
    }

    pub fn set_trainable_mask(&mut self, mask: Vec<bool>, batch_norm: bool) -> Result<()> {
        if mask.len() != self.trainable.len() {
            return Err(Error::shape(
                "trainable mask",
                format!("{} flags for {} layers", mask.len(), self.trainable.len()),
            ));
        }
        self.trainable = mask;
        self.batch_norm_trainable = batch_norm;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum::<usize>()
            + self.batch_norm.as_ref().map_or(0, |b| 2 * b.dim())
    }
}

/// Gradients for every extractor parameter; untrainable entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnGrads {
    pub convs: Vec<ConvParams>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

impl FcnGrads {
    pub fn zeros_like(model: &FcnModel) -> Self {
        let bn = model.batch_norm.as_ref().map_or(0, BatchNormState::dim);
        FcnGrads {
            convs: model
                .convs
                .iter()
                .map(|c| ConvParams {
                    weights: Tensor::zeros(c.weights.dims().to_vec()),
                    bias: Tensor::zeros(c.bias.dims().to_vec()),
                })
                .collect(),
            bn_gamma: vec![0.0; bn],
            bn_beta: vec![0.0; bn],
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &FcnGrads, alpha: f64) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += alpha * y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += alpha * y;
            }
        }
        for (x, y) in self.bn_gamma.iter_mut().zip(&other.bn_gamma) {
            *x += alpha * y;
        }
        for (x, y) in self.bn_beta.iter_mut().zip(&other.bn_beta) {
            *x += alpha * y;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.convs
            .iter()
            .all(|c| c.weights.data().iter().chain(c.bias.data()).all(|&v| v == 0.0))
            && self.bn_gamma.iter().chain(&self.bn_beta).all(|&v| v == 0.0)
    }
}
