//! Dense kernels with hand-written backward passes.

mod batch_norm;
mod conv;
mod elementwise;
mod gemm;
mod tensor;

pub use batch_norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, BatchNormCache, BatchNormGrads, BatchNormState, BatchStats,
    NormMode, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, conv_output_extent, group_sum_channels, ConvGrads, ConvLayerSpec};
pub use elementwise::{logsumexp, pow_elem, relu, relu_backward, softmax, upsample_nearest};
pub use tensor::Tensor;
