use std::fmt;
use std::str::FromStr;

use crate::data::{rescale_image, Image, RescaleTarget};
use crate::error::{Error, Result};
use crate::numerics::{conv_output_extent, ConvLayerSpec};

/// One convolution of the extractor, optionally followed by a ReLU.
/// Written as `<kernel>x<filters>s<stride>[+relu]`, e.g. `5x16s2+relu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcnLayer {
    pub kernel_size: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub relu: bool,
}

impl FcnLayer {
    pub fn new(kernel_size: usize, out_channels: usize, stride: usize, relu: bool) -> Self {
        FcnLayer {
            kernel_size,
            out_channels,
            stride,
            relu,
        }
    }
}

impl fmt::Display for FcnLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}s{}", self.kernel_size, self.out_channels, self.stride)?;
        if self.relu {
            f.write_str("+relu")?;
        }
        Ok(())
    }
}

impl FromStr for FcnLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad layer `{s}`, expected e.g. `5x16s2+relu`"));
        let s = s.trim();
        let (body, relu) = match s.strip_suffix("+relu") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let (kernel, rest) = body.split_once('x').ok_or_else(bad)?;
        let (filters, stride) = rest.split_once('s').ok_or_else(bad)?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(FcnLayer::new(num(kernel)?, num(filters)?, num(stride)?, relu))
    }
}

/// Receptive-field size and the input-pixel step between adjacent grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcnTopology {
    pub in_channels: usize,
    pub layers: Vec<FcnLayer>,
    pub normalize_descriptors: bool,
    pub batch_norm_before_head: bool,
}

impl Default for FcnTopology {
    fn default() -> Self {
        FcnTopology {
            in_channels: 3,
            layers: vec![
                FcnLayer::new(5, 16, 2, true),
                FcnLayer::new(3, 32, 2, true),
                FcnLayer::new(3, 64, 1, false),
            ],
            normalize_descriptors: true,
            batch_norm_before_head: true,
        }
    }
}

impl FcnTopology {
    /// Custom layers with the default normalization flags.
    pub fn with_layers(in_channels: usize, layers: Vec<FcnLayer>) -> Self {
        FcnTopology {
            in_channels,
            layers,
            ..FcnTopology::default()
        }
    }

    /// Parses a comma-separated layer list such as `5x16s2+relu,3x64s1`.
    pub fn parse_layers(spec: &str) -> Result<Vec<FcnLayer>> {
        spec.split(',').map(str::parse).collect()
    }

    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("topology has no layers"));
        }
        for spec in self.conv_specs() {
            spec.validate()?;
        }
        if self.descriptor_dim() < 2 {
            return Err(Error::invalid(format!(
                "descriptor dimension must be >= 2, got {}",
                self.descriptor_dim()
            )));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> Vec<ConvLayerSpec> {
        let mut in_channels = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let spec = ConvLayerSpec {
                    kernel_size: l.kernel_size,
                    stride: l.stride,
                    in_channels,
                    out_channels: l.out_channels,
                    has_bias: true,
                };
                in_channels = l.out_channels;
                spec
            })
            .collect()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// `rf_l = rf_{l-1} + (k_l - 1) * jump_{l-1}`, `jump_l = jump_{l-1} * s_l`.
    pub fn receptive_field(&self) -> ReceptiveField {
        self.layers
            .iter()
            .fold(ReceptiveField { size: 1, jump: 1 }, |rf, l| ReceptiveField {
                size: rf.size + (l.kernel_size - 1) * rf.jump,
                jump: rf.jump * l.stride,
            })
    }

    fn extent(&self, n: usize) -> Option<usize> {
        self.layers
            .iter()
            .try_fold(n, |n, l| conv_output_extent(n, l.kernel_size, l.stride))
    }

    /// Output grid `(rows, cols)` for an input of `height x width` pixels.
    pub fn grid_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match (self.extent(height), self.extent(width)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::InputTooSmall {
                height,
                width,
                min: self.receptive_field().size,
            }),
        }
    }

    /// Number of descriptors produced for a `height x width` input.
    pub fn eta(&self, height: usize, width: usize) -> Result<usize> {
        let (r, c) = self.grid_shape(height, width)?;
        Ok(r * c)
    }

    /// Smallest square input producing a `cells x cells` grid.
    pub fn resolution_for_grid(&self, cells: usize) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(cells.max(1), |n, l| (n - 1) * l.stride + l.kernel_size)
    }
}

/// Resolutions at which an image is fed to the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramidConfig {
    /// Strictly increasing multipliers of `base_resolution`.
    pub factors: Vec<f64>,
    pub base_resolution: usize,
}

impl Default for ScalePyramidConfig {
    fn default() -> Self {
        ScalePyramidConfig {
            factors: vec![1.0, 1.5, 2.0],
            base_resolution: 48,
        }
    }
}

impl ScalePyramidConfig {
    pub fn scales(&self) -> usize {
        self.factors.len()
    }

    /// Square side length of every pyramid level.
    pub fn resolutions(&self) -> Vec<usize> {
        self.factors
            .iter()
            .map(|f| (self.base_resolution as f64 * f).round() as usize)
            .collect()
    }

    pub fn validate(&self, topology: &FcnTopology) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::invalid("pyramid needs at least one scale"));
        }
        if self.factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::invalid(format!(
                "pyramid factors must be positive: {:?}",
                self.factors
            )));
        }
        if self.factors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "pyramid factors must be strictly increasing: {:?}",
                self.factors
            )));
        }
        for r in self.resolutions() {
            topology.grid_shape(r, r)?;
        }
        Ok(())
    }

    pub fn etas(&self, topology: &FcnTopology) -> Result<Vec<usize>> {
        self.resolutions().into_iter().map(|r| topology.eta(r, r)).collect()
    }
}

/// Resizes `image` (bilinear) to each square pyramid resolution.
pub fn scale_pyramid(image: &Image, cfg: &ScalePyramidConfig, topology: &FcnTopology) -> Result<Vec<Image>> {
    cfg.validate(topology)?;
    cfg.resolutions()
        .into_iter()
        .map(|r| rescale_image(image, RescaleTarget::Exact { width: r, height: r }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_syntax_round_trips() {
        let layers = FcnTopology::parse_layers("5x16s2+relu, 3x32s2+relu,3x64s1").unwrap();
        assert_eq!(layers, FcnTopology::default().layers);
        assert_eq!(FcnTopology::default().layers_string(), "5x16s2+relu,3x32s2+relu,3x64s1");
        assert!("5x16".parse::<FcnLayer>().is_err());
        assert!("ax16s2".parse::<FcnLayer>().is_err());
    }

    #[test]
    fn receptive_field_recurrence() {
        let one = FcnTopology::with_layers(3, vec![FcnLayer::new(5, 4, 2, false)]);
        assert_eq!(one.receptive_field(), ReceptiveField { size: 5, jump: 2 });
        let def = FcnTopology::default();
        assert_eq!(def.receptive_field(), ReceptiveField { size: 17, jump: 4 });
        let mut deeper = def.clone();
        deeper.layers.push(FcnLayer::new(1, 8, 1, false));
        assert_eq!(deeper.receptive_field().size, 17);
    }

    #[test]
    fn eta_by_recurrence() {
        let def = FcnTopology::default();
        assert_eq!(def.eta(32, 32).unwrap(), 16);
        assert_eq!(def.eta(64, 64).unwrap(), 144);
        assert_eq!(def.eta(17, 17).unwrap(), 1);
        let err = def.eta(16, 40).unwrap_err();
        assert!(matches!(err, Error::InputTooSmall { min: 17, .. }), "{err}");
    }

    #[test]
    fn resolution_for_grid_inverts_eta() {
        let def = FcnTopology::default();
        for cells in 1..12 {
            let r = def.resolution_for_grid(cells);
            assert_eq!(def.grid_shape(r, r).unwrap(), (cells, cells));
            if r > 17 {
                assert!(def.grid_shape(r - 1, r - 1).unwrap().0 < cells);
            }
        }
        // 25 / 36 / 49 descriptors at 33, 37 and 41 pixels: 110 in total
        let counts: Vec<usize> = [5, 6, 7]
            .iter()
            .map(|&g| def.eta(def.resolution_for_grid(g), def.resolution_for_grid(g)).unwrap())
            .collect();
        assert_eq!(counts, vec![25, 36, 49]);
        assert_eq!(counts.iter().sum::<usize>(), 110);
    }

    #[test]
    fn pyramid_validation_and_counts() {
        let def = FcnTopology::default();
        let cfg = ScalePyramidConfig {
            factors: vec![1.0, 2.0],
            base_resolution: 32,
        };
        assert_eq!(cfg.etas(&def).unwrap(), vec![16, 144]);
        let bad = ScalePyramidConfig {
            factors: vec![2.0, 1.0],
            base_resolution: 32,
        };
        assert!(bad.validate(&def).is_err());
        let tiny = ScalePyramidConfig {
            factors: vec![1.0],
            base_resolution: 10,
        };
        assert!(tiny.validate(&def).is_err());
    }

    #[test]
    fn unit_pyramid_is_identity() {
        let img = Image::filled(32, 32, 3, 0.25);
        let cfg = ScalePyramidConfig {
            factors: vec![1.0],
            base_resolution: 32,
        };
        let out = scale_pyramid(&img, &cfg, &FcnTopology::default()).unwrap();
        assert_eq!(out, vec![img]);
    }
}
