use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fcnbnl_core::data::{
    apply_perturbation, generate_synthetic_dataset, load_dataset_dir, read_split_file, save_dataset_dir,
    split_by_assignment, split_dataset, Dataset, Image, PerturbationKind, SynthConfig,
};
use fcnbnl_core::timing::{run_timing_sweep, timing_csv, TimingMode};
use fcnbnl_core::training::gradcheck::{grad_check, GradComponent};
use fcnbnl_core::training::{
    evaluate, history_csv, initialize_bank, load_checkpoint, save_checkpoint, train, Checkpoint, EvalReport,
};
use fcnbnl_core::{FcnModel, NbnlConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.fcnbnl";

/// Plain-text log mirrored to standard error.
struct RunLog {
    file: File,
    start: Instant,
}

impl RunLog {
    /// Creates the output directory; call only after validation.
    fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&cfg.out)
            .with_context(|| format!("cannot create output directory {}", cfg.out.display()))?;
        let manifest = format!("# fcnbnl {} {command}\n{}", env!("CARGO_PKG_VERSION"), cfg.to_text());
        write_file(&cfg.out.join("manifest.txt"), &manifest)?;
        let path = cfg.out.join("run.log");
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(RunLog {
            file,
            start: Instant::now(),
        })
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let line = format!("[{:8.2}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        eprintln!("{line}");
        // the log is best effort; results go to their own files
        let _ = writeln!(self.file, "{line}");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// The configured dataset split into (train, test). A `splits.txt` next to
/// an image directory takes precedence over the random split.
fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let data = match &cfg.dataset_path {
        Some(path) => {
            if !path.is_dir() {
                bail!("dataset directory {} does not exist", path.display());
            }
            let data = load_dataset_dir(path)?;
            if let Some(assignment) = read_split_file(path)? {
                return Ok(split_by_assignment(&data, &assignment)?);
            }
            data
        }
        None => generate_synthetic_dataset(&cfg.synth_config())?,
    };
    Ok(split_dataset(&data, cfg.train_fraction, cfg.seed)?)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.dataset_path.is_some() {
        bail!("synth writes a new dataset; unset dataset.path");
    }
    let synth = cfg.synth_config();
    let data = generate_synthetic_dataset(&synth)?;
    let mut log = RunLog::create(cfg, "synth")?;
    let root = cfg.out.join("dataset");
    save_dataset_dir(&data, &root)?;
    log.line(format!(
        "wrote {} images of {} classes to {}",
        data.len(),
        data.labels().len(),
        root.display()
    ));
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let (train_set, test_set) = load_splits(cfg)?;
    let topology = cfg.topology()?;
    let mut model = FcnModel::init(topology, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let nbnl = NbnlConfig::new(cfg.q, cfg.prototypes, train_set.labels().len())?;
    let training = cfg.training_config();
    let mut log = RunLog::create(cfg, "train")?;
    log.line(format!(
        "{} train / {} test images, {} classes, {} parameters",
        train_set.len(),
        test_set.len(),
        train_set.labels().len(),
        model.parameter_count()
    ));
    let mut bank = initialize_bank(&model, &cfg.pyramid, &train_set, nbnl, training.batch_size, cfg.seed)?;
    let history = train(&mut model, &mut bank, &cfg.pyramid, &train_set, &training)?;
    for r in &history {
        log.line(format!("epoch {:3} loss {:.6} lr {}", r.epoch, r.loss, r.learning_rate));
    }
    write_file(&cfg.out.join("history.csv"), &history_csv(&history))?;
    let checkpoint = Checkpoint {
        model,
        bank,
        pyramid: cfg.pyramid.clone(),
        epoch: training.epochs,
        seed: cfg.seed,
    };
    let path = cfg.out.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &checkpoint, cfg.precision)?;
    log.line(format!("checkpoint written to {}", path.display()));
    let report = evaluate(&checkpoint.model, &checkpoint.bank, &checkpoint.pyramid, &test_set)?;
    write_reports(cfg, &mut log, &test_set, &[(PerturbationKind::Original, report)])
}

fn write_reports(
    cfg: &RunConfig,
    log: &mut RunLog,
    data: &Dataset,
    reports: &[(PerturbationKind, EvalReport)],
) -> Result<()> {
    let mut summary = String::from("condition,accuracy,images\n");
    for (kind, report) in reports {
        summary.push_str(&format!("{kind},{},{}\n", report.accuracy, report.predictions.len()));
        write_file(&cfg.out.join(format!("confusion_{kind}.csv")), &report.confusion_csv())?;
        let mut per_class = String::from("label,name,accuracy\n");
        for (label, acc) in report.per_class_accuracy.iter().enumerate() {
            let acc = acc.map(|a| a.to_string()).unwrap_or_default();
            per_class.push_str(&format!("{label},{},{acc}\n", data.labels().name(label)));
        }
        write_file(&cfg.out.join(format!("per_class_{kind}.csv")), &per_class)?;
        log.line(format!(
            "{kind}: accuracy {:.4} on {} images",
            report.accuracy,
            report.predictions.len()
        ));
    }
    write_file(&cfg.out.join("eval.csv"), &summary)
}

/// `None` evaluates unperturbed images; `all` runs the whole sweep.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, perturb: Option<&str>) -> Result<()> {
    cfg.validate()?;
    let kinds: Vec<PerturbationKind> = match perturb {
        None => vec![PerturbationKind::Original],
        Some("all") => PerturbationKind::ALL.to_vec(),
        Some(kind) => vec![kind.parse()?],
    };
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (_, test_set) = load_splits(cfg)?;
    if test_set.labels().len() != ckpt.bank.classes() {
        bail!(
            "checkpoint scores {} classes but the dataset has {}",
            ckpt.bank.classes(),
            test_set.labels().len()
        );
    }
    let mut log = RunLog::create(cfg, "eval")?;
    log.line(format!(
        "evaluating {} on {} test images",
        checkpoint.display(),
        test_set.len()
    ));
    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let data = test_set.map_images(|img| apply_perturbation(img, kind))?;
        reports.push((kind, evaluate(&ckpt.model, &ckpt.bank, &ckpt.pyramid, &data)?));
    }
    write_reports(cfg, &mut log, &test_set, &reports)
}

fn bench_images(cfg: &RunConfig) -> Result<Vec<Image>> {
    let per_class = cfg.bench_images.div_ceil(cfg.synth.classes);
    let data = generate_synthetic_dataset(&SynthConfig {
        images_per_class: per_class,
        ..cfg.synth_config()
    })?;
    Ok(data
        .items()
        .iter()
        .take(cfg.bench_images)
        .map(|s| s.image.clone())
        .collect())
}

pub fn bench(cfg: &RunConfig, checkpoint: Option<&PathBuf>) -> Result<()> {
    cfg.validate()?;
    let model = match checkpoint {
        Some(path) => {
            load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?
                .model
        }
        None => FcnModel::init(cfg.topology()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let images = bench_images(cfg)?;
    let mut log = RunLog::create(cfg, "bench")?;
    let rows = run_timing_sweep(
        &images,
        &cfg.bench_counts,
        cfg.bench_reps,
        &model,
        &cfg.patch_extractor(),
    )?;
    for r in &rows {
        log.line(format!(
            "count {:4}: patch {:.3e} s ({:.3e} s/descriptor), fc {:.3e} s for {} cells ({:.3e} s/descriptor)",
            r.requested_count,
            r.patch_seconds,
            r.seconds_per_descriptor(TimingMode::Patch),
            r.fc_seconds,
            r.fc_count,
            r.seconds_per_descriptor(TimingMode::FullyConvolutional),
        ));
    }
    write_file(&cfg.out.join("timing.csv"), &timing_csv(&rows))
}

/// Returns whether every component stayed within its tolerance.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let mut log = RunLog::create(cfg, "gradcheck")?;
    let mut csv = String::from("component,max_relative_error,tolerance,trials,redraws,status\n");
    let mut all_pass = true;
    for component in GradComponent::all() {
        let report = grad_check(component, cfg.gradcheck_trials, cfg.seed)?;
        let tolerance = cfg.gradcheck_tolerance.unwrap_or(component.default_tolerance());
        let pass = report.max_relative_error < tolerance;
        all_pass &= pass;
        let status = if pass { "pass" } else { "FAIL" };
        csv.push_str(&format!(
            "{component},{:e},{tolerance:e},{},{},{status}\n",
            report.max_relative_error, report.trials, report.redraws
        ));
        log.line(format!(
            "{component}: max relative error {:.3e} (tolerance {tolerance:e}) {status}",
            report.max_relative_error
        ));
    }
    write_file(&cfg.out.join("gradcheck.csv"), &csv)?;
    Ok(all_pass)
}
