//! Self-describing binary checkpoints.
//!
//! Layout: the magic line `FCNBNL1\n`, then a sequence of named records.
//! Each record is `u32` name length, UTF-8 name, `u8` dtype (1 = f32,
//! 2 = f64), `u8` rank, `rank x u32` dims and the little-endian values.
//! Metadata records are always stored as f64 so that integers round-trip.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fcn::{ConvParams, FcnLayer, FcnModel, FcnTopology, ScalePyramidConfig};
use crate::nbnl::{NbnlConfig, PrototypeBank};
use crate::numerics::{BatchNormState, Tensor};

const MAGIC: &[u8; 8] = b"FCNBNL1\n";
const FORMAT_VERSION: f64 = 1.0;

/// Storage dtype of the parameter tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("precision must be f32 or f64, got `{other}`"))),
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FcnModel,
    pub bank: PrototypeBank,
    pub pyramid: ScalePyramidConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

struct Record {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn record(&mut self, name: &str, dims: &[usize], values: &[f64], precision: Precision) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.buf.extend((name.len() as u32).to_le_bytes());
        self.buf.extend(name.as_bytes());
        self.buf.push(precision.tag());
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.buf.extend((d as u32).to_le_bytes());
        }
        for &v in values {
            match precision {
                Precision::F32 => self.buf.extend((v as f32).to_le_bytes()),
                Precision::F64 => self.buf.extend(v.to_le_bytes()),
            }
        }
    }

    fn meta(&mut self, name: &str, values: &[f64]) {
        self.record(name, &[values.len()], values, Precision::F64);
    }

    fn param(&mut self, name: &str, dims: &[usize], values: &[f64]) {
        self.record(name, dims, values, self.precision);
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint, precision: Precision) -> Vec<u8> {
    let mut w = Writer {
        buf: MAGIC.to_vec(),
        precision,
    };
    let topo = ckpt.model.topology();
    w.meta("meta.format_version", &[FORMAT_VERSION]);
    w.meta(
        "meta.training",
        &[
            ckpt.epoch as f64,
            (ckpt.seed & 0xFFFF_FFFF) as f64,
            (ckpt.seed >> 32) as f64,
        ],
    );
    w.meta("topology.in_channels", &[topo.in_channels as f64]);
    let layers: Vec<f64> = topo
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.kernel_size as f64,
                l.out_channels as f64,
                l.stride as f64,
                l.relu as u8 as f64,
            ]
        })
        .collect();
    w.record("topology.layers", &[topo.layers.len(), 4], &layers, Precision::F64);
    w.meta(
        "topology.flags",
        &[
            topo.normalize_descriptors as u8 as f64,
            topo.batch_norm_before_head as u8 as f64,
        ],
    );
    w.meta("pyramid.factors", &ckpt.pyramid.factors);
    w.meta("pyramid.base_resolution", &[ckpt.pyramid.base_resolution as f64]);
    let cfg = ckpt.bank.config();
    w.meta(
        "nbnl.config",
        &[cfg.q, cfg.prototypes_per_class as f64, cfg.classes as f64],
    );
    for (i, c) in ckpt.model.convs.iter().enumerate() {
        w.param(&format!("fcn.conv{i}.weight"), c.weights.dims(), c.weights.data());
        w.param(&format!("fcn.conv{i}.bias"), c.bias.dims(), c.bias.data());
    }
    if let Some(bn) = &ckpt.model.batch_norm {
        let d = [bn.dim()];
        w.param("fcn.bn.gamma", &d, &bn.gamma);
        w.param("fcn.bn.beta", &d, &bn.beta);
        w.param("fcn.bn.running_mean", &d, &bn.running_mean);
        w.param("fcn.bn.running_var", &d, &bn.running_var);
    }
    w.param(
        "nbnl.prototypes",
        &[cfg.classes, cfg.prototypes_per_class, ckpt.bank.dim()],
        ckpt.bank.weights(),
    );
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32("record name length")?;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| Error::Checkpoint(format!("record name at byte {at} is not UTF-8")))?
            .to_string();
        let head = self.take(2, &name)?;
        let (dtype, rank) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(&name)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}` has an overflowing shape")))?;
        let values = match dtype {
            1 => self
                .take(count.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            2 => self
                .take(count.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            t => return Err(Error::Checkpoint(format!("record `{name}` has unknown dtype {t}"))),
        };
        Ok(Record { name, dims, values })
    }
}

struct Records(Vec<Record>);

impl Records {
    fn get(&self, name: &str, expected: &[usize]) -> Result<&[f64]> {
        let r = self
            .0
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
        if r.dims != expected {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: r.dims.clone(),
            });
        }
        Ok(&r.values)
    }

    /// A metadata vector of any length.
    fn meta(&self, name: &str) -> Result<&[f64]> {
        let r = self
            .0
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
        if r.dims.len() != 1 {
            return Err(Error::Checkpoint(format!("record `{name}` must be a vector")));
        }
        Ok(&r.values)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name, &[1])?[0])
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} is not a count: {v}")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut reader = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut records = Vec::new();
    while reader.pos < bytes.len() {
        records.push(reader.record()?);
    }
    let recs = Records(records);
    let version = recs.scalar("meta.format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let training = recs.get("meta.training", &[3])?;
    let epoch = as_count(training[0], "epoch")?;
    let seed = as_count(training[1], "seed")? as u64 | (as_count(training[2], "seed")? as u64) << 32;

    let in_channels = as_count(recs.scalar("topology.in_channels")?, "in_channels")?;
    let layer_rec = recs
        .0
        .iter()
        .find(|r| r.name == "topology.layers")
        .ok_or_else(|| Error::Checkpoint("missing record `topology.layers`".into()))?;
    let n_layers = layer_rec.dims.first().copied().unwrap_or(0);
    let layer_vals = recs.get("topology.layers", &[n_layers, 4])?;
    let layers = layer_vals
        .chunks(4)
        .map(|l| {
            Ok(FcnLayer::new(
                as_count(l[0], "kernel size")?,
                as_count(l[1], "channels")?,
                as_count(l[2], "stride")?,
                l[3] != 0.0,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = recs.get("topology.flags", &[2])?;
    let topology = FcnTopology {
        in_channels,
        layers,
        normalize_descriptors: flags[0] != 0.0,
        batch_norm_before_head: flags[1] != 0.0,
    };
    topology.validate()?;

    let pyramid = ScalePyramidConfig {
        factors: recs.meta("pyramid.factors")?.to_vec(),
        base_resolution: as_count(recs.scalar("pyramid.base_resolution")?, "base resolution")?,
    };
    pyramid.validate(&topology)?;

    let nc = recs.get("nbnl.config", &[3])?;
    let config = NbnlConfig::new(nc[0], as_count(nc[1], "prototypes")?, as_count(nc[2], "classes")?)?;

    let mut convs = Vec::with_capacity(topology.layers.len());
    for (i, spec) in topology.conv_specs().iter().enumerate() {
        let wd = spec.weight_dims();
        let weights = recs.get(&format!("fcn.conv{i}.weight"), &wd)?.to_vec();
        let bias = recs.get(&format!("fcn.conv{i}.bias"), &[spec.out_channels])?.to_vec();
        convs.push(ConvParams {
            weights: Tensor::new(wd, weights)?,
            bias: Tensor::new(vec![spec.out_channels], bias)?,
        });
    }
    let dim = topology.descriptor_dim();
    let batch_norm = if topology.batch_norm_before_head {
        Some(BatchNormState {
            gamma: recs.get("fcn.bn.gamma", &[dim])?.to_vec(),
            beta: recs.get("fcn.bn.beta", &[dim])?.to_vec(),
            running_mean: recs.get("fcn.bn.running_mean", &[dim])?.to_vec(),
            running_var: recs.get("fcn.bn.running_var", &[dim])?.to_vec(),
        })
    } else {
        None
    };
    let model = FcnModel::from_parts(topology, convs, batch_norm)?;
    let protos = recs
        .get("nbnl.prototypes", &[config.classes, config.prototypes_per_class, dim])?
        .to_vec();
    let bank = PrototypeBank::new(config, dim, protos)?;
    Ok(Checkpoint {
        model,
        bank,
        pyramid,
        epoch,
        seed,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(ckpt, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

impl Checkpoint {
    /// Fails with a shape error naming the first tensor whose shape differs
    /// from what `topology` would create.
    pub fn check_topology(&self, topology: &FcnTopology) -> Result<()> {
        let specs = topology.conv_specs();
        for (i, spec) in specs.iter().enumerate() {
            let found = self
                .model
                .convs
                .get(i)
                .map_or_else(Vec::new, |c| c.weights.dims().to_vec());
            if found != spec.weight_dims() {
                return Err(Error::CheckpointShape {
                    name: format!("fcn.conv{i}.weight"),
                    expected: spec.weight_dims(),
                    found,
                });
            }
        }
        if self.model.convs.len() != specs.len() {
            let i = specs.len();
            return Err(Error::CheckpointShape {
                name: format!("fcn.conv{i}.weight"),
                expected: Vec::new(),
                found: self.model.convs[i].weights.dims().to_vec(),
            });
        }
        let ours = self.model.topology();
        if ours.layers != topology.layers
            || ours.normalize_descriptors != topology.normalize_descriptors
            || ours.batch_norm_before_head != topology.batch_norm_before_head
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint topology `{}` differs from `{}`",
                ours.layers_string(),
                topology.layers_string()
            )));
        }
        Ok(())
    }
}
