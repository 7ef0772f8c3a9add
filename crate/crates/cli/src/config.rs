//! Flat `section.key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fcnbnl_core::data::SynthConfig;
use fcnbnl_core::timing::{PatchExtractor, MIN_REPETITIONS};
use fcnbnl_core::training::{Precision, TrainingConfig};
use fcnbnl_core::{FcnTopology, NbnlConfig, ScalePyramidConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,

    /// Image directory; synthetic data when unset.
    pub dataset_path: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_fraction: f64,

    pub layers: String,
    pub normalize: bool,
    pub batch_norm: bool,

    pub pyramid: ScalePyramidConfig,
    pub q: f64,
    pub prototypes: usize,

    pub training: TrainingConfig,
    /// `None` follows the 50% / 75% default for the configured epochs.
    pub lr_drops: Option<[usize; 2]>,
    /// `None` fine-tunes every layer of the configured topology.
    pub fine_tune_layers: Option<usize>,

    pub bench_counts: Vec<usize>,
    pub bench_reps: usize,
    pub bench_images: usize,
    pub patch_sizes: Vec<usize>,

    pub gradcheck_trials: usize,
    /// Overrides every component's own tolerance when set.
    pub gradcheck_tolerance: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            precision: Precision::F64,
            dataset_path: None,
            synth: SynthConfig::default(),
            train_fraction: 2.0 / 3.0,
            layers: FcnTopology::default().layers_string(),
            normalize: true,
            batch_norm: true,
            pyramid: ScalePyramidConfig::default(),
            q: 10.0,
            prototypes: 2,
            training: TrainingConfig::default(),
            lr_drops: None,
            fine_tune_layers: None,
            bench_counts: vec![16, 52, 110],
            bench_reps: MIN_REPETITIONS,
            bench_images: 4,
            patch_sizes: PatchExtractor::default().patch_sizes,
            gradcheck_trials: 20,
            gradcheck_tolerance: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "run.seed",
        "run.out",
        "run.precision",
        "dataset.path",
        "dataset.classes",
        "dataset.images_per_class",
        "dataset.image_size",
        "dataset.motif_size",
        "dataset.noise",
        "dataset.train_fraction",
        "model.layers",
        "model.normalize",
        "model.batch_norm",
        "pyramid.factors",
        "pyramid.base",
        "nbnl.q",
        "nbnl.p",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "train.lr_drops",
        "train.lr_drop_factor",
        "train.weight_decay_prototypes",
        "train.weight_decay_network",
        "train.fine_tune_layers",
        "train.rgb_jitter",
        "bench.counts",
        "bench.reps",
        "bench.images",
        "bench.patch_sizes",
        "gradcheck.trials",
        "gradcheck.tolerance",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "run.out" => self.out = PathBuf::from(value),
            "run.precision" => self.precision = parse(key, value)?,
            "dataset.path" => self.dataset_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dataset.classes" => self.synth.classes = parse(key, value)?,
            "dataset.images_per_class" => self.synth.images_per_class = parse(key, value)?,
            "dataset.image_size" => self.synth.image_size = parse(key, value)?,
            "dataset.motif_size" => self.synth.motif_size = parse(key, value)?,
            "dataset.noise" => self.synth.noise_level = parse(key, value)?,
            "dataset.train_fraction" => self.train_fraction = parse(key, value)?,
            "model.layers" => self.layers = value.to_string(),
            "model.normalize" => self.normalize = parse(key, value)?,
            "model.batch_norm" => self.batch_norm = parse(key, value)?,
            "pyramid.factors" => self.pyramid.factors = parse_list(key, value)?,
            "pyramid.base" => self.pyramid.base_resolution = parse(key, value)?,
            "nbnl.q" => self.q = parse(key, value)?,
            "nbnl.p" => self.prototypes = parse(key, value)?,
            "train.epochs" => self.training.epochs = parse(key, value)?,
            "train.batch_size" => self.training.batch_size = parse(key, value)?,
            "train.lr" => self.training.learning_rate = parse(key, value)?,
            "train.lr_drops" => {
                let drops: Vec<usize> = parse_list(key, value)?;
                let drops: [usize; 2] = drops
                    .try_into()
                    .map_err(|_| anyhow!("`{key}` takes exactly two epochs, got `{value}`"))?;
                self.lr_drops = Some(drops);
            }
            "train.lr_drop_factor" => self.training.lr_drop_factor = parse(key, value)?,
            "train.weight_decay_prototypes" => self.training.weight_decay_prototypes = parse(key, value)?,
            "train.weight_decay_network" => self.training.weight_decay_network = parse(key, value)?,
            "train.fine_tune_layers" => {
                self.fine_tune_layers = match value {
                    "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.rgb_jitter" => self.training.rgb_jitter = parse(key, value)?,
            "bench.counts" => self.bench_counts = parse_list(key, value)?,
            "bench.reps" => self.bench_reps = parse(key, value)?,
            "bench.images" => self.bench_images = parse(key, value)?,
            "bench.patch_sizes" => self.patch_sizes = parse_list(key, value)?,
            "gradcheck.trials" => self.gradcheck_trials = parse(key, value)?,
            "gradcheck.tolerance" => {
                self.gradcheck_tolerance = match value {
                    "" | "default" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "run.seed" => self.seed.to_string(),
            "run.out" => self.out.display().to_string(),
            "run.precision" => self.precision.to_string(),
            "dataset.path" => self
                .dataset_path
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "dataset.classes" => self.synth.classes.to_string(),
            "dataset.images_per_class" => self.synth.images_per_class.to_string(),
            "dataset.image_size" => self.synth.image_size.to_string(),
            "dataset.motif_size" => self.synth.motif_size.to_string(),
            "dataset.noise" => self.synth.noise_level.to_string(),
            "dataset.train_fraction" => self.train_fraction.to_string(),
            "model.layers" => self.layers.clone(),
            "model.normalize" => self.normalize.to_string(),
            "model.batch_norm" => self.batch_norm.to_string(),
            "pyramid.factors" => join(&self.pyramid.factors),
            "pyramid.base" => self.pyramid.base_resolution.to_string(),
            "nbnl.q" => self.q.to_string(),
            "nbnl.p" => self.prototypes.to_string(),
            "train.epochs" => self.training.epochs.to_string(),
            "train.batch_size" => self.training.batch_size.to_string(),
            "train.lr" => self.training.learning_rate.to_string(),
            "train.lr_drops" => join(&self.lr_drops()),
            "train.lr_drop_factor" => self.training.lr_drop_factor.to_string(),
            "train.weight_decay_prototypes" => self.training.weight_decay_prototypes.to_string(),
            "train.weight_decay_network" => self.training.weight_decay_network.to_string(),
            "train.fine_tune_layers" => self.fine_tune_layers.map(|n| n.to_string()).unwrap_or("all".into()),
            "train.rgb_jitter" => self.training.rgb_jitter.to_string(),
            "bench.counts" => join(&self.bench_counts),
            "bench.reps" => self.bench_reps.to_string(),
            "bench.images" => self.bench_images.to_string(),
            "bench.patch_sizes" => join(&self.patch_sizes),
            "gradcheck.trials" => self.gradcheck_trials.to_string(),
            "gradcheck.tolerance" => self
                .gradcheck_tolerance
                .map(|t| t.to_string())
                .unwrap_or("default".into()),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("{}:{}: `{key}` set twice", path.display(), n + 1);
            }
            self.set(key, value)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Every key with its current value, loadable again with `--config`.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn lr_drops(&self) -> [usize; 2] {
        self.lr_drops
            .unwrap_or_else(|| TrainingConfig::default_drops(self.training.epochs))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn topology(&self) -> Result<FcnTopology> {
        Ok(FcnTopology {
            layers: FcnTopology::parse_layers(&self.layers).context("model.layers")?,
            normalize_descriptors: self.normalize,
            batch_norm_before_head: self.batch_norm,
            ..FcnTopology::default()
        })
    }

    pub fn training_config(&self) -> TrainingConfig {
        let layers = FcnTopology::parse_layers(&self.layers).map_or(0, |l| l.len());
        TrainingConfig {
            lr_drop_epochs: self.lr_drops(),
            fine_tune_last_n_layers: self.fine_tune_layers.unwrap_or(layers),
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn nbnl_config(&self) -> Result<NbnlConfig> {
        Ok(NbnlConfig::new(self.q, self.prototypes, self.synth.classes)?)
    }

    pub fn patch_extractor(&self) -> PatchExtractor {
        PatchExtractor {
            patch_sizes: self.patch_sizes.clone(),
            seed: self.seed,
            ..PatchExtractor::default()
        }
    }

    /// Checks everything a command may touch, before any output exists.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("dataset.train_fraction must be in (0, 1), got {}", self.train_fraction);
        }
        let topology = self.topology()?;
        topology.validate()?;
        self.pyramid.validate(&topology)?;
        if self.dataset_path.is_none() {
            self.nbnl_config()?;
        } else {
            NbnlConfig::new(self.q, self.prototypes, 2)?;
        }
        self.training_config().validate()?;
        if let Some(n) = self.fine_tune_layers.filter(|&n| n > topology.layers.len()) {
            bail!(
                "train.fine_tune_layers is {n} but the model has {} layers",
                topology.layers.len()
            );
        }
        if self.bench_counts.is_empty() || self.bench_counts.contains(&0) {
            bail!("bench.counts must be positive");
        }
        if self.bench_reps < MIN_REPETITIONS {
            bail!("bench.reps must be at least {MIN_REPETITIONS}");
        }
        if self.bench_images == 0 {
            bail!("bench.images must be at least 1");
        }
        self.patch_extractor().validate()?;
        if self.gradcheck_trials == 0 {
            bail!("gradcheck.trials must be at least 1");
        }
        if let Some(t) = self.gradcheck_tolerance {
            if !(t > 0.0 && t.is_finite()) {
                bail!("gradcheck.tolerance must be positive, got {t}");
            }
        }
        Ok(())
    }
}
