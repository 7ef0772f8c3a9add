//! Trainable fully-convolutional descriptor extractor.

mod forward;
mod model;
mod topology;

pub use forward::{
    extract_levels, extract_levels_batch, extract_multiscale, fcn_backward, fcn_backward_batch, fcn_forward,
    fcn_forward_batch, ForwardCache, NORMALIZE_MIN_NORM,
};
pub use model::{ConvParams, FcnGrads, FcnModel};
pub use topology::{scale_pyramid, FcnLayer, FcnTopology, ReceptiveField, ScalePyramidConfig};
