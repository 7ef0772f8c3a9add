use crate::error::{Error, Result};

/// Standard deviation of the per-channel colour shift used by RGB jitter.
pub const RGB_JITTER_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Images per SGD step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch indices (ascending) at which the rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: [usize; 2],
    pub lr_drop_factor: f64,
    pub weight_decay_prototypes: f64,
    /// `lambda` of the l2 penalty on the extractor parameters.
    pub weight_decay_network: f64,
    pub seed: u64,
    pub fine_tune_last_n_layers: usize,
    pub rgb_jitter: bool,
}

impl TrainingConfig {
    /// Defaults with the two rate drops at 50% and 75% of `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainingConfig {
            epochs,
            lr_drop_epochs: Self::default_drops(epochs),
            ..TrainingConfig::default()
        }
    }

    pub fn default_drops(epochs: usize) -> [usize; 2] {
        [epochs / 2, epochs * 3 / 4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("lr_drop_factor", self.lr_drop_factor),
            ("weight_decay_prototypes", self.weight_decay_prototypes),
            ("weight_decay_network", self.weight_decay_network),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lr_drop_epochs[0] > self.lr_drop_epochs[1] {
            return Err(Error::invalid(format!(
                "lr drop epochs must be ascending, got {:?}",
                self.lr_drop_epochs
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.5,
            lr_drop_epochs: Self::default_drops(30),
            lr_drop_factor: 0.1,
            weight_decay_prototypes: 1e-5,
            weight_decay_network: 1e-5,
            seed: 0,
            fine_tune_last_n_layers: 3,
            rgb_jitter: false,
        }
    }
}
