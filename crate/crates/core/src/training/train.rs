use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{TrainingConfig, RGB_JITTER_STD};
use crate::data::Dataset;
use crate::descriptors::{DescriptorSet, MultiScaleDescriptors};
use crate::error::{Error, Result};
use crate::fcn::{
    extract_levels, extract_levels_batch, fcn_backward_batch, scale_pyramid, FcnGrads, FcnModel, ScalePyramidConfig,
};
use crate::nbnl::{surrogate_loss, NbnlConfig, PrototypeBank};
use crate::numerics::{NormMode, Tensor};

/// Mean training loss and learning rate of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean surrogate loss over the epoch's images (data term only).
    pub loss: f64,
    pub learning_rate: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.learning_rate));
    }
    out
}

/// Derives an independent stream for `(seed, salt)`.
pub(crate) fn derived_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const SALT_BANK_INIT: u64 = 1 << 40;
const SALT_JITTER: u64 = 1 << 41;

/// Pyramid levels of every image, as extractor-ready tensors.
pub fn pyramid_tensors(model: &FcnModel, pyramid: &ScalePyramidConfig, data: &Dataset) -> Result<Vec<Vec<Tensor>>> {
    data.items()
        .iter()
        .map(|s| {
            Ok(scale_pyramid(&s.image, pyramid, model.topology())?
                .iter()
                .map(|img| img.to_tensor())
                .collect())
        })
        .collect()
}

/// Builds the initial prototype bank from descriptors the (untrained)
/// extractor produces on the training images. With batch norm the
/// descriptors come from train-mode passes over groups of `batch_size`
/// images, matching what the head sees during training.
pub fn initialize_bank(
    model: &FcnModel,
    pyramid: &ScalePyramidConfig,
    data: &Dataset,
    config: NbnlConfig,
    batch_size: usize,
    seed: u64,
) -> Result<PrototypeBank> {
    if config.classes != data.labels().len() {
        return Err(Error::invalid(format!(
            "bank has {} classes, dataset has {}",
            config.classes,
            data.labels().len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mode = if model.batch_norm.is_some() {
        NormMode::Train
    } else {
        NormMode::Infer
    };
    let dim = model.topology().descriptor_dim();
    let mut pools = vec![DescriptorSet::empty(dim); config.classes];
    let levels = pyramid_tensors(model, pyramid, data)?;
    for (samples, group) in data.items().chunks(batch_size).zip(levels.chunks(batch_size)) {
        let (msds, _) = extract_levels_batch(model, group, mode)?;
        for (sample, msd) in samples.iter().zip(msds) {
            pools[sample.label].extend(&msd.flatten())?;
        }
    }
    PrototypeBank::init_from_pools(config, &pools, &mut derived_rng(seed, SALT_BANK_INIT))
}

fn jitter_levels(levels: &[Tensor], shift: [f64; 3]) -> Vec<Tensor> {
    levels
        .iter()
        .map(|t| {
            let mut out = t.clone();
            let plane = t.dims()[1] * t.dims()[2];
            for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let s = shift[c % 3];
                chunk.iter_mut().for_each(|v| *v = (*v + s).clamp(0.0, 1.0));
            }
            out
        })
        .collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn sgd_step(model: &mut FcnModel, grads: &FcnGrads, lr: f64, scale: f64, decay: f64) {
    let trainable = model.trainable().to_vec();
    for ((p, g), t) in model.convs.iter_mut().zip(&grads.convs).zip(trainable) {
        if !t {
            continue;
        }
        for (w, gw) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w -= lr * (scale * gw + decay * *w);
        }
        for (b, gb) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= lr * (scale * gb + decay * *b);
        }
    }
    let bn_trainable = model.batch_norm_trainable();
    if let (Some(bn), true) = (model.batch_norm.as_mut(), bn_trainable) {
        for (w, gw) in bn.gamma.iter_mut().zip(&grads.bn_gamma) {
            *w -= lr * (scale * gw + decay * *w);
        }
        for (b, gb) in bn.beta.iter_mut().zip(&grads.bn_beta) {
            *b -= lr * (scale * gb + decay * *b);
        }
    }
}

/// Mini-batch SGD on the descriptor-level surrogate loss plus l2 penalties.
///
/// Each pyramid level of a mini-batch goes through the extractor as one
/// batch, so batch norm sees the cells of all its images together.
/// Only the last `cfg.fine_tune_last_n_layers` convolutions are updated.
/// Prototypes are decayed and projected onto the unit ball after every
/// step. The run is a deterministic function of its inputs and `cfg.seed`.
pub fn train(
    model: &mut FcnModel,
    bank: &mut PrototypeBank,
    pyramid: &ScalePyramidConfig,
    data: &Dataset,
    cfg: &TrainingConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    pyramid.validate(model.topology())?;
    if data.labels().len() != bank.classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, prototype bank has {}",
            data.labels().len(),
            bank.classes()
        )));
    }
    if bank.dim() != model.topology().descriptor_dim() {
        return Err(Error::shape(
            "train",
            format!(
                "prototype dimension {} vs descriptor dimension {}",
                bank.dim(),
                model.topology().descriptor_dim()
            ),
        ));
    }
    model.set_fine_tune_last(cfg.fine_tune_last_n_layers);
    let levels = pyramid_tensors(model, pyramid, data)?;
    let labels: Vec<usize> = data.items().iter().map(|s| s.label).collect();
    let mode = NormMode::Train;

    // a frozen, deterministic extractor yields the same descriptors every epoch
    let frozen = if !model.any_trainable() && !cfg.rgb_jitter && model.batch_norm.is_none() {
        Some(
            levels
                .iter()
                .map(|l| extract_levels(model, l, mode).map(|(msd, _)| msd))
                .collect::<Result<Vec<MultiScaleDescriptors>>>()?,
        )
    } else {
        None
    };

    let jitter = Normal::new(0.0, RGB_JITTER_STD).expect("valid std");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, epoch as u64));
        let mut jitter_rng = derived_rng(cfg.seed, SALT_JITTER + epoch as u64);
        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_bank = vec![0.0; bank.weights().len()];
            let mut batch_loss = 0.0;
            let mut grad_model = None;
            if let Some(cached) = &frozen {
                for &i in batch {
                    let s = surrogate_loss(&cached[i], bank, labels[i])?;
                    batch_loss += s.value;
                    add_into(&mut grad_bank, &s.grad_prototypes);
                }
            } else {
                let inputs: Vec<Vec<Tensor>> = batch
                    .iter()
                    .map(|&i| {
                        if cfg.rgb_jitter {
                            let shift = [(); 3].map(|_| jitter.sample(&mut jitter_rng));
                            jitter_levels(&levels[i], shift)
                        } else {
                            levels[i].clone()
                        }
                    })
                    .collect();
                let (msds, caches) = extract_levels_batch(model, &inputs, mode)?;
                // upstream gradients regrouped per level: [level][image]
                let mut grad_levels: Vec<Vec<DescriptorSet>> = vec![Vec::with_capacity(batch.len()); caches.len()];
                for (msd, &i) in msds.iter().zip(batch) {
                    let s = surrogate_loss(msd, bank, labels[i])?;
                    batch_loss += s.value;
                    add_into(&mut grad_bank, &s.grad_prototypes);
                    for (dst, g) in grad_levels.iter_mut().zip(s.grad_descriptors) {
                        dst.push(g);
                    }
                }
                if model.any_trainable() {
                    let mut total = FcnGrads::zeros_like(model);
                    for (cache, g) in caches.iter().zip(&grad_levels) {
                        total.add_scaled(&fcn_backward_batch(model, cache, g)?, 1.0);
                    }
                    grad_model = Some(total);
                }
                if let Some(bn) = model.batch_norm.as_mut() {
                    for c in caches.iter().filter_map(|c| c.batch_norm()) {
                        bn.update_running(c);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for (w, g) in bank.weights_mut().iter_mut().zip(&grad_bank) {
                *w -= lr * (scale * g + cfg.weight_decay_prototypes * *w);
            }
            bank.project_to_unit_ball();
            if let Some(g) = &grad_model {
                sgd_step(model, g, lr, scale, cfg.weight_decay_network);
            }
        }
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss / data.len() as f64,
            learning_rate: lr,
        });
    }
    Ok(history)
}
