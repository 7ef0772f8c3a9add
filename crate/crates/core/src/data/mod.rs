//! Images, datasets, synthetic scenes and test-time perturbations.

mod dataset;
mod image;
mod synth;
mod transform;

pub use dataset::{
    load_dataset_dir, read_split_file, save_dataset_dir, split_by_assignment, split_dataset, Dataset, LabelSet,
    Provenance, Sample, SplitSide, SPLITS_FILE,
};
pub use image::{load_image, save_image, Image};
pub use synth::{generate_synthetic_dataset, motif_template, SynthConfig};
pub use transform::{apply_perturbation, rescale_image, PerturbationKind, RescaleTarget};
