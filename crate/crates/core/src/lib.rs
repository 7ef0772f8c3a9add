//! Part-based image classification with naive Bayes nearest-neighbour
//! scoring on top of a trainable fully-convolutional extractor.
//!
//! An image is rescaled into a small pyramid, every level goes through the
//! same convolutional network, and each cell of the resulting grids is a
//! local descriptor. A prototype head scores descriptors against `p`
//! learned prototypes per class and averages the scores per scale; the
//! whole stack is trained end to end by SGD on a descriptor-level upper
//! bound of the image log-loss.

pub mod data;
pub mod descriptors;
mod error;
pub mod fcn;
pub mod nbnl;
pub mod nbnn;
pub mod numerics;
pub mod timing;
pub mod training;

pub use descriptors::{DescriptorGrid, DescriptorSet, MultiScaleDescriptors};
pub use error::{Error, Result};
pub use fcn::{FcnModel, FcnTopology, ScalePyramidConfig};
pub use nbnl::{NbnlConfig, PrototypeBank};
pub use numerics::{NormMode, Tensor};
