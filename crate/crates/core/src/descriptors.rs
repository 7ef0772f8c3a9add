use crate::error::{Error, Result};

/// A flat list of `dim`-dimensional descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape(
                "descriptors",
                format!("{} values do not form descriptors of dimension {dim}", data.len()),
            ));
        }
        Ok(DescriptorSet { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        DescriptorSet { dim, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut set = DescriptorSet::empty(dim);
        for r in rows {
            set.push(r.as_ref())?;
        }
        Ok(set)
    }

    pub fn push(&mut self, descriptor: &[f64]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::shape(
                "descriptors",
                format!(
                    "descriptor of length {} pushed into set of dimension {}",
                    descriptor.len(),
                    self.dim
                ),
            ));
        }
        self.data.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn extend(&mut self, other: &DescriptorSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::shape(
                "descriptors",
                format!("dimension {} vs {}", other.dim, self.dim),
            ));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> DescriptorSet {
        DescriptorSet {
            dim: self.dim,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }
}

/// Descriptors laid out on the `rows x cols` output grid of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    pub rows: usize,
    pub cols: usize,
    pub descriptors: DescriptorSet,
}

impl DescriptorGrid {
    pub fn new(rows: usize, cols: usize, descriptors: DescriptorSet) -> Result<Self> {
        if rows * cols != descriptors.len() {
            return Err(Error::shape(
                "descriptor grid",
                format!("{rows}x{cols} grid holds {} descriptors", descriptors.len()),
            ));
        }
        Ok(DescriptorGrid {
            rows,
            cols,
            descriptors,
        })
    }

    /// Number of descriptors on the grid.
    pub fn eta(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.descriptors.get(row * self.cols + col)
    }
}

/// Per-scale descriptor grids of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleDescriptors {
    pub scales: Vec<DescriptorGrid>,
}

impl MultiScaleDescriptors {
    pub fn new(scales: Vec<DescriptorGrid>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("at least one scale is required"));
        }
        let dim = scales[0].descriptors.dim();
        for (i, s) in scales.iter().enumerate() {
            if s.eta() == 0 {
                return Err(Error::invalid(format!("scale {i} holds no descriptors")));
            }
            if s.descriptors.dim() != dim {
                return Err(Error::shape(
                    "multi-scale descriptors",
                    format!("scale {i} has dimension {}, scale 0 has {dim}", s.descriptors.dim()),
                ));
            }
        }
        Ok(MultiScaleDescriptors { scales })
    }

    /// Single scale holding the given descriptors as a `1 x n` grid.
    pub fn single(descriptors: DescriptorSet) -> Result<Self> {
        let n = descriptors.len();
        MultiScaleDescriptors::new(vec![DescriptorGrid::new(1, n, descriptors)?])
    }

    pub fn dim(&self) -> usize {
        self.scales[0].descriptors.dim()
    }

    pub fn etas(&self) -> Vec<usize> {
        self.scales.iter().map(DescriptorGrid::eta).collect()
    }

    pub fn total(&self) -> usize {
        self.scales.iter().map(DescriptorGrid::eta).sum()
    }

    /// All descriptors of all scales, in scale order.
    pub fn flatten(&self) -> DescriptorSet {
        let mut out = DescriptorSet::empty(self.dim());
        for s in &self.scales {
            out.extend(&s.descriptors).expect("dimensions checked at construction");
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> MultiScaleDescriptors {
        MultiScaleDescriptors {
            scales: self
                .scales
                .iter()
                .map(|s| DescriptorGrid {
                    rows: s.rows,
                    cols: s.cols,
                    descriptors: s.descriptors.scaled(alpha),
                })
                .collect(),
        }
    }
}
