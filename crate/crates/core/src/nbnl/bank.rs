use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};

/// Hyperparameters of the prototype head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NbnlConfig {
    /// Exponent of the hinge-rectified l_q aggregation, `q >= 1`.
    pub q: f64,
    pub prototypes_per_class: usize,
    pub classes: usize,
}

impl NbnlConfig {
    pub fn new(q: f64, prototypes_per_class: usize, classes: usize) -> Result<Self> {
        let cfg = NbnlConfig {
            q,
            prototypes_per_class,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_q(self.q)?;
        if self.prototypes_per_class == 0 {
            return Err(Error::invalid("need at least one prototype per class"));
        }
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

pub(crate) fn validate_q(q: f64) -> Result<()> {
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::invalid(format!("q must be a finite value >= 1, got {q}")));
    }
    Ok(())
}

/// Standard deviation of the noise added to sampled initial prototypes.
pub const PROTOTYPE_INIT_NOISE: f64 = 0.01;

/// Rounding headroom above norm 1 tolerated by the projection.
const PROJECTION_SLACK: f64 = 1e-12;

/// `classes x prototypes_per_class x dim` prototype vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    config: NbnlConfig,
    dim: usize,
    weights: Vec<f64>,
}

impl PrototypeBank {
    pub fn new(config: NbnlConfig, dim: usize, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.classes * config.prototypes_per_class * dim;
        if dim == 0 || weights.len() != expected {
            return Err(Error::shape(
                "prototype bank",
                format!(
                    "{} x {} x {dim} bank needs {expected} values, got {}",
                    config.classes,
                    config.prototypes_per_class,
                    weights.len()
                ),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("prototype bank contains non-finite values"));
        }
        Ok(PrototypeBank { config, dim, weights })
    }

    pub fn zeros(config: NbnlConfig, dim: usize) -> Result<Self> {
        let n = config.classes * config.prototypes_per_class * dim;
        PrototypeBank::new(config, dim, vec![0.0; n])
    }

    /// Samples `p` descriptors per class from `pools`, perturbs them with
    /// Gaussian noise and projects them onto the unit ball.
    pub fn init_from_pools(config: NbnlConfig, pools: &[DescriptorSet], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if pools.len() != config.classes {
            return Err(Error::invalid(format!(
                "{} descriptor pools for {} classes",
                pools.len(),
                config.classes
            )));
        }
        let dim = pools[0].dim();
        let noise = Normal::new(0.0, PROTOTYPE_INIT_NOISE).expect("valid normal");
        let p = config.prototypes_per_class;
        let mut weights = Vec::with_capacity(config.classes * p * dim);
        for (class, pool) in pools.iter().enumerate() {
            if pool.is_empty() || pool.dim() != dim {
                return Err(Error::invalid(format!("class {class} has no usable descriptors")));
            }
            let picks: Vec<usize> = if pool.len() >= p {
                sample(rng, pool.len(), p).into_vec()
            } else {
                (0..p).map(|_| rng.random_range(0..pool.len())).collect()
            };
            for i in picks {
                weights.extend(pool.get(i).iter().map(|v| v + noise.sample(rng)));
            }
        }
        let mut bank = PrototypeBank::new(config, dim, weights)?;
        bank.project_to_unit_ball();
        Ok(bank)
    }

    pub fn config(&self) -> &NbnlConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// The `p x dim` block of prototypes belonging to `class`.
    pub fn class_prototypes(&self, class: usize) -> &[f64] {
        let block = self.config.prototypes_per_class * self.dim;
        &self.weights[class * block..(class + 1) * block]
    }

    pub fn prototype(&self, class: usize, index: usize) -> &[f64] {
        let start = (class * self.config.prototypes_per_class + index) * self.dim;
        &self.weights[start..start + self.dim]
    }

    /// Rescales every prototype with norm above 1 back onto the unit sphere.
    /// Idempotent: a freshly projected vector is not rescaled again.
    pub fn project_to_unit_ball(&mut self) {
        for proto in self.weights.chunks_mut(self.dim) {
            let norm = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + PROJECTION_SLACK {
                proto.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    pub fn max_prototype_norm(&self) -> f64 {
        self.weights
            .chunks(self.dim)
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}
