use std::path::PathBuf;

use fcnbnl_core::data::{generate_synthetic_dataset, Dataset, Image, LabelSet, Provenance, Sample, SynthConfig};
use fcnbnl_core::fcn::{extract_levels_batch, FcnModel, FcnTopology, ScalePyramidConfig};
use fcnbnl_core::nbnl::surrogate_loss;
use fcnbnl_core::training::{
    checkpoint_to_bytes, evaluate, initialize_bank, load_checkpoint, pyramid_tensors, save_checkpoint, train,
    Checkpoint, Precision, TrainingConfig,
};
use fcnbnl_core::{Error, NbnlConfig, NormMode, PrototypeBank};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn topology(batch_norm: bool) -> FcnTopology {
    FcnTopology {
        layers: FcnTopology::parse_layers("3x4s2+relu,3x6s1").unwrap(),
        batch_norm_before_head: batch_norm,
        ..FcnTopology::default()
    }
}

fn pyramid() -> ScalePyramidConfig {
    ScalePyramidConfig {
        factors: vec![1.0, 1.5],
        base_resolution: 12,
    }
}

fn synth(classes: usize, per_class: usize, seed: u64) -> Dataset {
    generate_synthetic_dataset(&SynthConfig {
        classes,
        images_per_class: per_class,
        image_size: 16,
        motif_size: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn setup(batch_norm: bool, data: &Dataset, seed: u64) -> (FcnModel, PrototypeBank) {
    let model = FcnModel::init(topology(batch_norm), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let cfg = NbnlConfig::new(10.0, 2, data.labels().len()).unwrap();
    let bank = initialize_bank(&model, &pyramid(), data, cfg, 4, seed).unwrap();
    (model, bank)
}

fn snapshot(model: &FcnModel, bank: &PrototypeBank) -> Vec<u8> {
    checkpoint_to_bytes(
        &Checkpoint {
            model: model.clone(),
            bank: bank.clone(),
            pyramid: pyramid(),
            epoch: 0,
            seed: 0,
        },
        Precision::F64,
    )
}

fn quick_config(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        ..TrainingConfig::with_epochs(epochs)
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = synth(3, 4, 1);
    let (mut model, mut bank) = setup(false, &data, 1);
    let before = snapshot(&model, &bank);
    let cfg = TrainingConfig {
        learning_rate: 0.0,
        weight_decay_prototypes: 0.0,
        weight_decay_network: 0.0,
        ..quick_config(2)
    };
    train(&mut model, &mut bank, &pyramid(), &data, &cfg).unwrap();
    assert_eq!(before, snapshot(&model, &bank));
}

#[test]
fn schedule_drops_twice() {
    let cfg = TrainingConfig {
        learning_rate: 0.1,
        lr_drop_epochs: [10, 20],
        ..TrainingConfig::default()
    };
    let rates: Vec<f64> = [0, 9, 10, 19, 20, 29]
        .iter()
        .map(|&e| cfg.learning_rate_at(e))
        .collect();
    let expected = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001];
    for (r, e) in rates.iter().zip(expected) {
        assert!((r - e).abs() < 1e-15, "{rates:?}");
    }
}

/// Constant red and constant blue images: every descriptor of a class is
/// identical, so a frozen random extractor already separates them.
#[test]
fn separable_toy_is_fit_exactly_with_frozen_extractor() {
    let labels = LabelSet::new(vec!["red".into(), "blue".into()]).unwrap();
    let items: Vec<Sample> = (0..12)
        .map(|i| {
            let label = i % 2;
            let mut image = Image::filled(16, 16, 3, 0.1 + 0.02 * (i / 2) as f64);
            let strong = if label == 0 { 0 } else { 2 };
            for y in 0..16 {
                for x in 0..16 {
                    image.set(x, y, strong, 0.9);
                }
            }
            Sample {
                image,
                label,
                path: format!("{}/{i}.ppm", labels.name(label)),
            }
        })
        .collect();
    let data = Dataset::new(items, labels, Provenance::Directory(PathBuf::from("toy"))).unwrap();
    let (mut model, mut bank) = setup(false, &data, 7);
    let before = snapshot(&model, &bank);
    let cfg = TrainingConfig {
        fine_tune_last_n_layers: 0,
        learning_rate: 1.0,
        ..quick_config(50)
    };
    train(&mut model, &mut bank, &pyramid(), &data, &cfg).unwrap();
    assert_ne!(before, snapshot(&model, &bank));
    let report = evaluate(&model, &bank, &pyramid(), &data).unwrap();
    assert_eq!(report.accuracy, 1.0, "{:?}", report.confusion);
}

fn batch_surrogate(model: &FcnModel, bank: &PrototypeBank, batch: &Dataset) -> f64 {
    let levels = pyramid_tensors(model, &pyramid(), batch).unwrap();
    let (msds, _) = extract_levels_batch(model, &levels, NormMode::Train).unwrap();
    msds.iter()
        .zip(batch.items())
        .map(|(m, s)| surrogate_loss(m, bank, s.label).unwrap().value)
        .sum()
}

#[test]
fn one_small_step_decreases_the_batch_loss() {
    let data = synth(3, 10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let mut items = data.items().to_vec();
        items.shuffle(&mut rng);
        items.truncate(4);
        let batch = Dataset::new(
            items,
            data.labels().clone(),
            Provenance::Directory(PathBuf::from("batch")),
        )
        .unwrap();
        let (mut model, mut bank) = setup(true, &data, trial);
        let before = batch_surrogate(&model, &bank, &batch);
        let cfg = TrainingConfig {
            learning_rate: 1e-4,
            weight_decay_prototypes: 0.0,
            weight_decay_network: 0.0,
            ..quick_config(1)
        };
        train(&mut model, &mut bank, &pyramid(), &batch, &cfg).unwrap();
        let after = batch_surrogate(&model, &bank, &batch);
        assert!(after < before, "trial {trial}: {before} -> {after}");
    }
}

#[test]
fn prototypes_stay_in_the_unit_ball_and_runs_repeat() {
    let data = synth(3, 6, 3);
    let cfg = TrainingConfig {
        learning_rate: 5.0,
        ..quick_config(4)
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (mut model, mut bank) = setup(true, &data, 3);
        let history = train(&mut model, &mut bank, &pyramid(), &data, &cfg).unwrap();
        assert_eq!(history.len(), 4);
        assert!(bank.max_prototype_norm() <= 1.0 + 1e-6);
        runs.push(snapshot(&model, &bank));
    }
    assert_eq!(runs[0], runs[1]);
}

/// A head whose outputs overflow f64 poisons the first batch's loss.
#[test]
fn divergence_is_reported_with_its_batch() {
    let data = synth(2, 4, 4);
    let mut model = FcnModel::init(
        FcnTopology {
            normalize_descriptors: false,
            ..topology(false)
        },
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let cfg = NbnlConfig::new(10.0, 2, 2).unwrap();
    let mut bank = initialize_bank(&model, &pyramid(), &data, cfg, 4, 4).unwrap();
    let head = model.convs.last_mut().unwrap();
    head.weights = head.weights.scale(f64::MAX);
    match train(&mut model, &mut bank, &pyramid(), &data, &quick_config(3)) {
        Err(Error::Diverged { epoch, batch }) => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn constant_predictor_fills_one_column() {
    let data = synth(3, 4, 5);
    let (model, _) = setup(false, &data, 5);
    let bank = PrototypeBank::zeros(NbnlConfig::new(10.0, 2, 3).unwrap(), 6).unwrap();
    let report = evaluate(&model, &bank, &pyramid(), &data).unwrap();
    let nonzero: Vec<usize> = (0..3)
        .filter(|&c| report.confusion.iter().any(|row| row[c] > 0))
        .collect();
    assert_eq!(nonzero, vec![0]);
    for (row, count) in report.confusion.iter().zip(data.class_counts()) {
        assert_eq!(row.iter().sum::<usize>(), count);
    }
    assert!((report.accuracy - 4.0 / 12.0).abs() < 1e-15);
}

#[test]
fn checkpoint_files_round_trip_byte_for_byte() {
    let data = synth(3, 4, 6);
    let (mut model, mut bank) = setup(true, &data, 6);
    train(&mut model, &mut bank, &pyramid(), &data, &quick_config(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for precision in [Precision::F64, Precision::F32] {
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = Checkpoint {
            model: model.clone(),
            bank: bank.clone(),
            pyramid: pyramid(),
            epoch: 1,
            seed: 6,
        };
        save_checkpoint(&a, &ckpt, precision).unwrap();
        save_checkpoint(&b, &load_checkpoint(&a).unwrap(), precision).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
    let loaded = load_checkpoint(dir.path().join("a.ckpt")).unwrap();
    let first = evaluate(&model, &bank, &pyramid(), &data).unwrap();
    let again = evaluate(&loaded.model, &loaded.bank, &loaded.pyramid, &data).unwrap();
    assert_eq!(first.predictions.len(), again.predictions.len());
}
