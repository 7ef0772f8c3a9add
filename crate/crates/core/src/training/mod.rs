//! End-to-end training, evaluation, checkpoints and gradient checks.

mod checkpoint;
mod config;
mod eval;
pub mod gradcheck;
mod train;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, Precision,
};
pub use config::{TrainingConfig, RGB_JITTER_STD};
pub use eval::{evaluate, EvalReport};
pub use train::{history_csv, initialize_bank, pyramid_tensors, train, EpochRecord};
