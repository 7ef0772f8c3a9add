//! Patch-by-patch versus fully-convolutional extraction cost.
//!
//! Patch mode crops every sampled window, resizes it to the receptive field
//! and runs the network once per descriptor. Fully-convolutional mode
//! resizes the whole image to a few square resolutions and reads the
//! descriptors off the output grids, sharing every intermediate activation
//! between overlapping windows.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{rescale_image, Image, RescaleTarget};
use crate::descriptors::{DescriptorGrid, DescriptorSet, MultiScaleDescriptors};
use crate::error::{Error, Result};
use crate::fcn::{extract_levels, fcn_forward, FcnModel, FcnTopology};
use crate::numerics::{NormMode, Tensor};

pub const MIN_REPETITIONS: usize = 5;
/// Most pyramid levels fully-convolutional mode may use to reach a count.
pub const MAX_FC_SCALES: usize = 3;

/// Random square windows spread evenly over `patch_sizes`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchExtractor {
    pub patch_sizes: Vec<usize>,
    /// Spend one descriptor of the budget on the whole image.
    pub full_image: bool,
    pub seed: u64,
}

impl Default for PatchExtractor {
    fn default() -> Self {
        PatchExtractor {
            patch_sizes: vec![12, 24, 48],
            full_image: true,
            seed: 0,
        }
    }
}

impl PatchExtractor {
    pub fn validate(&self) -> Result<()> {
        if self.patch_sizes.is_empty() || self.patch_sizes.contains(&0) {
            return Err(Error::invalid("patch sizes must be a non-empty list of positive sizes"));
        }
        Ok(())
    }
}

/// One descriptor per sampled patch; a scale per patch size (and one for
/// the full image when enabled).
pub fn extract_patch_mode(
    image: &Image,
    extractor: &PatchExtractor,
    model: &FcnModel,
    count: usize,
) -> Result<MultiScaleDescriptors> {
    extractor.validate()?;
    if count == 0 {
        return Err(Error::invalid("descriptor count must be >= 1"));
    }
    let (w, h) = (image.width(), image.height());
    if let Some(&too_big) = extractor.patch_sizes.iter().find(|&&s| s > w || s > h) {
        return Err(Error::invalid(format!(
            "patch size {too_big} exceeds the {w}x{h} image"
        )));
    }
    let rf = model.topology().receptive_field().size;
    let forward_one = |patch: &Image| -> Result<Vec<f64>> {
        let resized = rescale_image(patch, RescaleTarget::Exact { width: rf, height: rf })?;
        let (grid, _) = fcn_forward(model, &resized.to_tensor(), NormMode::Infer)?;
        Ok(grid.descriptors.get(0).to_vec())
    };
    let dim = model.topology().descriptor_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(extractor.seed);
    let patches = count - usize::from(extractor.full_image);
    let sizes = extractor.patch_sizes.len();
    let mut scales = Vec::new();
    for (i, &size) in extractor.patch_sizes.iter().enumerate() {
        let n = patches / sizes + usize::from(i < patches % sizes);
        if n == 0 {
            continue;
        }
        let mut set = DescriptorSet::empty(dim);
        for _ in 0..n {
            let x = rng.random_range(0..=w - size);
            let y = rng.random_range(0..=h - size);
            set.push(&forward_one(&image.crop(x, y, size, size)?)?)?;
        }
        scales.push(DescriptorGrid::new(1, n, set)?);
    }
    if extractor.full_image {
        let set = DescriptorSet::new(dim, forward_one(image)?)?;
        scales.push(DescriptorGrid::new(1, 1, set)?);
    }
    MultiScaleDescriptors::new(scales)
}

/// Square grid sides (ascending) whose total cell count is closest to
/// `count`; ties prefer fewer levels, then the smallest largest grid.
pub fn fc_grids_for_count(count: usize, max_scales: usize) -> Vec<usize> {
    /// (count error, levels, largest grid) and the grids themselves.
    type Candidate = ((usize, usize, usize), Vec<usize>);
    let limit = (count.max(1) as f64).sqrt().ceil() as usize + 1;
    let mut best: Option<Candidate> = None;
    fn search(
        start: usize,
        limit: usize,
        left: usize,
        count: usize,
        chosen: &mut Vec<usize>,
        best: &mut Option<Candidate>,
    ) {
        if !chosen.is_empty() {
            let total: usize = chosen.iter().map(|g| g * g).sum();
            let key = (total.abs_diff(count), chosen.len(), *chosen.last().expect("non-empty"));
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                *best = Some((key, chosen.clone()));
            }
        }
        if left == 0 {
            return;
        }
        for g in start..=limit {
            chosen.push(g);
            search(g + 1, limit, left - 1, count, chosen, best);
            chosen.pop();
        }
    }
    search(1, limit, max_scales.max(1), count, &mut Vec::new(), &mut best);
    best.expect("at least one candidate").1
}

/// Input resolutions realising `grids` under `topology`.
pub fn fc_resolutions(topology: &FcnTopology, grids: &[usize]) -> Vec<usize> {
    grids.iter().map(|&g| topology.resolution_for_grid(g)).collect()
}

/// Descriptors of `image` at the given square resolutions.
pub fn extract_fc_mode(image: &Image, model: &FcnModel, resolutions: &[usize]) -> Result<MultiScaleDescriptors> {
    let levels = resolutions
        .iter()
        .map(|&r| Ok(rescale_image(image, RescaleTarget::Exact { width: r, height: r })?.to_tensor()))
        .collect::<Result<Vec<Tensor>>>()?;
    Ok(extract_levels(model, &levels, NormMode::Infer)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimingMode {
    Patch,
    FullyConvolutional,
}

impl fmt::Display for TimingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimingMode::Patch => "patch",
            TimingMode::FullyConvolutional => "fc",
        })
    }
}

/// Median / spread of the per-image extraction time at one count.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub requested_count: usize,
    pub patch_count: usize,
    /// Cells actually produced by the chosen fc pyramid.
    pub fc_count: usize,
    pub fc_grids: Vec<usize>,
    pub patch_seconds: f64,
    pub patch_std: f64,
    pub fc_seconds: f64,
    pub fc_std: f64,
    pub reps: usize,
}

impl TimingRow {
    pub fn seconds_per_descriptor(&self, mode: TimingMode) -> f64 {
        match mode {
            TimingMode::Patch => self.patch_seconds / self.patch_count as f64,
            TimingMode::FullyConvolutional => self.fc_seconds / self.fc_count as f64,
        }
    }
}

/// `count,mode,median_seconds,std_seconds,reps`: one line per count and mode,
/// with the descriptor count each mode actually produced.
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("count,mode,median_seconds,std_seconds,reps\n");
    for r in rows {
        out.push_str(&format!(
            "{},patch,{:e},{:e},{}\n",
            r.patch_count, r.patch_seconds, r.patch_std, r.reps
        ));
        out.push_str(&format!(
            "{},fc,{:e},{:e},{}\n",
            r.fc_count, r.fc_seconds, r.fc_std, r.reps
        ));
    }
    out
}

fn median_and_std(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (median, var.sqrt())
}

/// Shortest wall time of one timed sample; short passes are repeated until a
/// sample is long enough that timer and scheduler jitter stop dominating.
const MIN_SAMPLE: Duration = Duration::from_millis(20);

type Job<'a> = Box<dyn Fn(&Image) -> Result<usize> + 'a>;

/// Median and std of seconds per image for every job over `images`. Each job
/// gets an untimed warm-up pass that also sizes its inner loop; the timed
/// samples are then interleaved round-robin so slow drift in machine load
/// lands on all jobs alike.
fn time_jobs(images: &[Image], reps: usize, jobs: &[Job]) -> Result<Vec<(f64, f64)>> {
    let pass = |job: &Job| -> Result<()> {
        for image in images {
            std::hint::black_box(job(image)?);
        }
        Ok(())
    };
    let mut passes = Vec::with_capacity(jobs.len());
    for job in jobs {
        let start = Instant::now();
        pass(job)?;
        let warm = start.elapsed().as_secs_f64().max(1e-9);
        passes.push((MIN_SAMPLE.as_secs_f64() / warm).ceil().max(1.0) as usize);
    }
    let mut samples = vec![Vec::with_capacity(reps); jobs.len()];
    for _ in 0..reps {
        for ((job, &n), out) in jobs.iter().zip(&passes).zip(&mut samples) {
            let start = Instant::now();
            for _ in 0..n {
                pass(job)?;
            }
            out.push(start.elapsed().as_secs_f64() / (n * images.len()) as f64);
        }
    }
    Ok(samples.iter_mut().map(|s| median_and_std(s)).collect())
}

/// Times both modes on `images` at every requested descriptor count.
/// Single-threaded; the median over `reps` passes is reported.
pub fn run_timing_sweep(
    images: &[Image],
    counts: &[usize],
    reps: usize,
    model: &FcnModel,
    extractor: &PatchExtractor,
) -> Result<Vec<TimingRow>> {
    if images.is_empty() {
        return Err(Error::invalid("timing needs at least one image"));
    }
    if reps < MIN_REPETITIONS {
        return Err(Error::invalid(format!(
            "timing needs at least {MIN_REPETITIONS} repetitions, got {reps}"
        )));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::invalid(
            "descriptor counts must be a non-empty list of positive values",
        ));
    }
    extractor.validate()?;
    let topology = model.topology();
    let plans: Vec<(usize, Vec<usize>, Vec<usize>)> = counts
        .iter()
        .map(|&count| {
            let grids = fc_grids_for_count(count, MAX_FC_SCALES);
            let resolutions = fc_resolutions(topology, &grids);
            (count, grids, resolutions)
        })
        .collect();
    let mut jobs: Vec<Job> = Vec::with_capacity(2 * plans.len());
    for (count, _, resolutions) in &plans {
        let count = *count;
        jobs.push(Box::new(move |img: &Image| {
            Ok(extract_patch_mode(img, extractor, model, count)?.total())
        }));
        jobs.push(Box::new(move |img: &Image| {
            Ok(extract_fc_mode(img, model, resolutions)?.total())
        }));
    }
    let timings = time_jobs(images, reps, &jobs)?;
    Ok(plans
        .iter()
        .zip(timings.chunks(2))
        .map(|((count, grids, _), t)| TimingRow {
            requested_count: *count,
            patch_count: *count,
            fc_count: grids.iter().map(|g| g * g).sum(),
            fc_grids: grids.clone(),
            patch_seconds: t[0].0,
            patch_std: t[0].1,
            fc_seconds: t[1].0,
            fc_std: t[1].1,
            reps,
        })
        .collect())
}
