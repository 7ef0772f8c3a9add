//! Non-parametric image-to-class nearest-neighbour classifier.

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nn_squared_distance(z: &[f64], pool: &DescriptorSet) -> f64 {
    pool.iter()
        .map(|s| squared_distance(z, s))
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean distance from `z` to its nearest neighbour in `pool`.
pub fn nn_distance(z: &[f64], pool: &DescriptorSet) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::invalid("nearest neighbour in an empty descriptor set"));
    }
    if z.len() != pool.dim() {
        return Err(Error::shape(
            "nn_distance",
            format!(
                "query of dimension {} against pool of dimension {}",
                z.len(),
                pool.dim()
            ),
        ));
    }
    Ok(nn_squared_distance(z, pool).sqrt())
}

/// Per-class descriptor pools gathered from training images.
#[derive(Clone, Debug)]
pub struct ClassDescriptorStore {
    pools: Vec<DescriptorSet>,
}

impl ClassDescriptorStore {
    pub fn new(dim: usize, classes: usize) -> Self {
        ClassDescriptorStore {
            pools: vec![DescriptorSet::empty(dim); classes],
        }
    }

    pub fn from_pools(pools: Vec<DescriptorSet>) -> Result<Self> {
        let store = ClassDescriptorStore { pools };
        store.validate()?;
        Ok(store)
    }

    pub fn add(&mut self, class: usize, descriptors: &DescriptorSet) -> Result<()> {
        let classes = self.pools.len();
        self.pools
            .get_mut(class)
            .ok_or_else(|| Error::invalid(format!("class {class} out of range for {classes} classes")))?
            .extend(descriptors)
    }

    pub fn classes(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, class: usize) -> &DescriptorSet {
        &self.pools[class]
    }

    fn validate(&self) -> Result<()> {
        if self.pools.is_empty() {
            return Err(Error::invalid("descriptor store has no classes"));
        }
        let dim = self.pools[0].dim();
        for (c, p) in self.pools.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("class {c} has no descriptors")));
            }
            if p.dim() != dim {
                return Err(Error::shape(
                    "descriptor store",
                    format!("class {c} has dimension {}", p.dim()),
                ));
            }
        }
        Ok(())
    }

    /// `sum_z d(z, pool_y)^2` for every class.
    pub fn image_to_class_distances(&self, query: &DescriptorSet) -> Result<Vec<f64>> {
        self.validate()?;
        if query.is_empty() {
            return Err(Error::invalid("query image has no descriptors"));
        }
        if query.dim() != self.pools[0].dim() {
            return Err(Error::shape(
                "classify_nbnn",
                format!(
                    "query dimension {} vs store dimension {}",
                    query.dim(),
                    self.pools[0].dim()
                ),
            ));
        }
        Ok(self
            .pools
            .iter()
            .map(|pool| query.iter().map(|z| nn_squared_distance(z, pool)).sum())
            .collect())
    }
}

/// Class minimizing the summed squared nearest-neighbour distance; ties go
/// to the lowest label.
pub fn classify_nbnn(query: &DescriptorSet, store: &ClassDescriptorStore) -> Result<usize> {
    let totals = store.image_to_class_distances(query)?;
    Ok(argmin_first(&totals))
}

pub(crate) fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}
