//! Prototype-based head: scoring, classification and training losses.

mod bank;
pub mod blocks;
mod loss;
mod score;

pub use bank::{NbnlConfig, PrototypeBank, PROTOTYPE_INIT_NOISE};
pub use loss::{descriptor_loss, descriptor_loss_grad, image_loss, surrogate_loss, SurrogateLoss};
pub use score::{bar_omega, class_scores, classify_nbnl, likelihood_h, likelihoods, omega, omega_backward};
