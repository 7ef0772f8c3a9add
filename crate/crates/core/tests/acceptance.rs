//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs sequentially in a single thread so the timing
//! criterion is not disturbed by concurrent work.

use std::time::{Duration, Instant};

use fcnbnl_core::data::{
    apply_perturbation, generate_synthetic_dataset, split_dataset, Dataset, Image, PerturbationKind, SynthConfig,
};
use fcnbnl_core::fcn::{fcn_forward, FcnLayer};
use fcnbnl_core::nbnl::blocks::omega_map;
use fcnbnl_core::nbnl::{image_loss, omega, surrogate_loss};
use fcnbnl_core::nbnn::{classify_nbnn, ClassDescriptorStore};
use fcnbnl_core::numerics::{conv2d, group_sum_channels, pow_elem, relu};
use fcnbnl_core::timing::{run_timing_sweep, PatchExtractor, TimingMode};
use fcnbnl_core::training::gradcheck::{grad_check, GradComponent};
use fcnbnl_core::training::{
    checkpoint_from_bytes, checkpoint_to_bytes, evaluate, initialize_bank, load_checkpoint, save_checkpoint, train,
    Checkpoint, EvalReport, Precision, TrainingConfig,
};
use fcnbnl_core::{
    DescriptorGrid, DescriptorSet, FcnModel, FcnTopology, MultiScaleDescriptors, NbnlConfig, NormMode, PrototypeBank,
    ScalePyramidConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---- independent oracles ------------------------------------------------

/// Direct transcription of the score definition, no stabilisation.
fn oracle_omega(z: &[f64], protos: &[f64], q: f64) -> f64 {
    let dim = z.len();
    let mut acc = 0.0;
    for s in protos.chunks(dim) {
        let mut dot = 0.0;
        for i in 0..dim {
            dot += z[i] * s[i];
        }
        if dot > 0.0 {
            acc += dot.powf(q);
        }
    }
    acc.powf(1.0 / q)
}

fn oracle_log_loss(u: &[f64], label: usize) -> f64 {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + u.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - u[label]
}

/// Image-level likelihoods: per scale mean of omega, then mean over scales.
fn oracle_h(scales: &[Vec<Vec<f64>>], bank: &PrototypeBank) -> Vec<f64> {
    (0..bank.classes())
        .map(|c| {
            let protos = bank.class_prototypes(c);
            let q = bank.config().q;
            scales
                .iter()
                .map(|zs| zs.iter().map(|z| oracle_omega(z, protos, q)).sum::<f64>() / zs.len() as f64)
                .sum::<f64>()
                / scales.len() as f64
        })
        .collect()
}

fn oracle_nbnn(query: &[Vec<f64>], pools: &[Vec<Vec<f64>>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, pool) in pools.iter().enumerate() {
        let mut total = 0.0;
        for z in query {
            let mut nearest = f64::INFINITY;
            for d in pool {
                let mut dist = 0.0;
                for i in 0..z.len() {
                    dist += (z[i] - d[i]) * (z[i] - d[i]);
                }
                if dist < nearest {
                    nearest = dist;
                }
            }
            total += nearest;
        }
        if total < best.0 {
            best = (total, c);
        }
    }
    best.1
}

fn random_msd(rng: &mut ChaCha8Rng, dim: usize, etas: &[usize]) -> (MultiScaleDescriptors, Vec<Vec<Vec<f64>>>) {
    let mut grids = Vec::new();
    let mut raw = Vec::new();
    for &eta in etas {
        let rows: Vec<Vec<f64>> = (0..eta).map(|_| gaussian(rng, dim)).collect();
        let set = DescriptorSet::from_rows(dim, &rows).unwrap();
        grids.push(DescriptorGrid::new(1, eta, set).unwrap());
        raw.push(rows);
    }
    (MultiScaleDescriptors::new(grids).unwrap(), raw)
}

fn random_bank(rng: &mut ChaCha8Rng, q: f64, p: usize, k: usize, dim: usize) -> PrototypeBank {
    let w = gaussian(rng, k * p * dim).iter().map(|v| v * 0.5).collect();
    PrototypeBank::new(NbnlConfig::new(q, p, k).unwrap(), dim, w).unwrap()
}

// ---- criteria -----------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (component, tol) in [
        (GradComponent::Omega, 1e-5),
        (GradComponent::SurrogateLoss, 1e-5),
        (GradComponent::FullStack, 1e-4),
    ] {
        let r = grad_check(component, 20, 2024).map_err(|e| e.to_string())?;
        ok &= r.trials >= 20 && r.max_relative_error < tol;
        lines.push(format!(
            "{component} {:.1e} < {tol:.0e} ({} trials)",
            r.max_relative_error, r.trials
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    check(ok, format!("{}; {:.2}s < 60s", lines.join(", "), elapsed.as_secs_f64()))
}

fn nbnn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut agree = 0;
    let n = 50;
    for _ in 0..n {
        let dim = rng.random_range(2..9);
        let k = rng.random_range(2..6);
        let pools: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| (0..rng.random_range(1..21)).map(|_| gaussian(&mut rng, dim)).collect())
            .collect();
        let query: Vec<Vec<f64>> = (0..rng.random_range(1..11)).map(|_| gaussian(&mut rng, dim)).collect();
        let store = ClassDescriptorStore::from_pools(
            pools
                .iter()
                .map(|p| DescriptorSet::from_rows(dim, p).unwrap())
                .collect(),
        )
        .unwrap();
        let got = classify_nbnn(&DescriptorSet::from_rows(dim, &query).unwrap(), &store).unwrap();
        agree += usize::from(got == oracle_nbnn(&query, &pools));
    }
    check(
        agree == n,
        format!("{agree}/{n} instances agree with exhaustive search"),
    )
}

fn jensen_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut violations, mut worst_gap, mut single_err, mut oracle_err) = (0, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let single = i % 4 == 0;
        let dim = rng.random_range(2..7);
        let k = rng.random_range(2..5);
        let p = rng.random_range(1..4);
        let q = [1.0, 2.0, 3.0, 10.0][rng.random_range(0..4)];
        let etas: Vec<usize> = if single {
            vec![1]
        } else {
            (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect()
        };
        let (msd, raw) = random_msd(&mut rng, dim, &etas);
        let bank = random_bank(&mut rng, q, p, k, dim);
        let label = rng.random_range(0..k);
        let bound = surrogate_loss(&msd, &bank, label).unwrap().value;
        let loss = image_loss(&msd, &bank, label).unwrap();
        oracle_err = oracle_err.max((loss - oracle_log_loss(&oracle_h(&raw, &bank), label)).abs());
        worst_gap = worst_gap.max(loss - bound);
        if loss > bound + 1e-9 {
            violations += 1;
        }
        if single {
            single_err = single_err.max((loss - bound).abs());
        }
    }
    check(
        violations == 0 && single_err <= 1e-12 && oracle_err <= 1e-9,
        format!(
            "{violations} violations of loss <= bound + 1e-9 (max loss-bound {worst_gap:.2e}); \
             m=1,eta=1 |loss-bound| {single_err:.1e} <= 1e-12; image loss vs oracle {oracle_err:.1e}"
        ),
    )
}

fn omega_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fails = [0usize; 4];
    for _ in 0..1000 {
        let dim = rng.random_range(1..9);
        let p = rng.random_range(1..6);
        let z = gaussian(&mut rng, dim);
        let s: Vec<f64> = gaussian(&mut rng, p * dim);
        let q = [1.0, 1.5, 2.0, 4.0, 10.0][rng.random_range(0..5)];
        let w = omega(&z, &s, q).unwrap();
        fails[0] += usize::from(w < 0.0);
        let alpha = rng.random_range(0.01..50.0);
        let scaled: Vec<f64> = z.iter().map(|v| v * alpha).collect();
        let ws = omega(&scaled, &s, q).unwrap();
        fails[1] += usize::from((ws - alpha * w).abs() > 1e-9 * (alpha * w).max(1.0));
        let by_q: Vec<f64> = [1.0, 2.0, 4.0, 10.0]
            .iter()
            .map(|&q| omega(&z, &s, q).unwrap())
            .collect();
        fails[2] += usize::from(by_q.windows(2).any(|pair| pair[1] > pair[0] * (1.0 + 1e-12)));
        let max_hinge = s
            .chunks(dim)
            .map(|sv| z.iter().zip(sv).map(|(a, b)| a * b).sum::<f64>().max(0.0))
            .fold(0.0, f64::max);
        fails[3] += usize::from(w < max_hinge * (1.0 - 1e-12));
    }
    check(
        fails.iter().all(|&f| f == 0),
        format!(
            "failures over 1000 instances: nonnegativity {}, homogeneity {}, q-monotonicity {}, max-hinge bound {}",
            fails[0], fails[1], fails[2], fails[3]
        ),
    )
}

fn block_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(2..9);
        let (k, p) = (rng.random_range(2..5), rng.random_range(1..4));
        let q = [1.0, 2.0, 3.0, 10.0][rng.random_range(0..4)];
        let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..5));
        let set = DescriptorSet::new(dim, gaussian(&mut rng, rows * cols * dim)).unwrap();
        let grid = DescriptorGrid::new(rows, cols, set).unwrap();
        let bank = random_bank(&mut rng, q, p, k, dim);

        // pipeline assembled here from the generic layers
        let n = rows * cols;
        let mut map = vec![0.0; dim * n];
        for (i, z) in grid.descriptors.iter().enumerate() {
            for (d, &v) in z.iter().enumerate() {
                map[d * n + i] = v;
            }
        }
        let input = Tensor::new(vec![dim, rows, cols], map).unwrap();
        let filters = Tensor::new(vec![k * p, dim, 1, 1], bank.weights().to_vec()).unwrap();
        let dots = conv2d(&input, &filters, None, 1).unwrap();
        let grouped = group_sum_channels(&pow_elem(&relu(&dots), q).unwrap(), p).unwrap();
        let pipeline = pow_elem(&grouped, 1.0 / q).unwrap();
        let library = omega_map(&grid, &bank).unwrap();

        for c in 0..k {
            for (i, z) in grid.descriptors.iter().enumerate() {
                let direct = omega(z, bank.class_prototypes(c), q).unwrap();
                worst = worst
                    .max((direct - pipeline.data()[c * n + i]).abs())
                    .max((direct - library.data()[c * n + i]).abs());
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("max |direct - pipeline| {worst:.1e} <= 1e-6 over 100 instances"),
    )
}

fn patch_fc_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let topo = FcnTopology {
        normalize_descriptors: false,
        batch_norm_before_head: false,
        ..FcnTopology::default()
    };
    let model = FcnModel::init(topo.clone(), &mut rng).unwrap();
    let rf = topo.receptive_field();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for (h, w) in [(33, 41), (17, 29), (45, 45)] {
        let image = Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (grid, _) = fcn_forward(&model, &image.to_tensor(), NormMode::Infer).unwrap();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let crop = image.crop(c * rf.jump, r * rf.jump, rf.size, rf.size).unwrap();
                let (single, _) = fcn_forward(&model, &crop.to_tensor(), NormMode::Infer).unwrap();
                assert_eq!(single.eta(), 1);
                for (a, b) in single.descriptors.get(0).iter().zip(grid.cell(r, c)) {
                    worst = worst.max((a - b).abs());
                }
                cells += 1;
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("{cells} cells, max |cell - crop forward| {worst:.1e} <= 1e-6"),
    )
}

// ---- end-to-end experiments ---------------------------------------------

const SEEDS: u64 = 5;

fn experiment_topology() -> FcnTopology {
    FcnTopology::with_layers(
        3,
        vec![
            FcnLayer::new(5, 16, 2, true),
            FcnLayer::new(3, 32, 2, true),
            FcnLayer::new(3, 32, 1, false),
        ],
    )
}

fn experiment_pyramid() -> ScalePyramidConfig {
    ScalePyramidConfig {
        factors: vec![1.0, 1.5, 2.0],
        base_resolution: 24,
    }
}

fn experiment_config(seed: u64, epochs: usize, frozen: bool) -> TrainingConfig {
    let mut cfg = TrainingConfig::with_epochs(epochs);
    cfg.seed = seed;
    cfg.learning_rate = 0.5;
    cfg.batch_size = 8;
    cfg.fine_tune_last_n_layers = if frozen { 0 } else { 3 };
    cfg
}

/// 4 classes, 50 train / 25 test images per class.
fn experiment_data(seed: u64) -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        classes: 4,
        images_per_class: 75,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic_dataset(&cfg).unwrap();
    let (train, test) = split_dataset(&data, 2.0 / 3.0, seed).unwrap();
    assert_eq!(train.class_counts(), vec![50; 4]);
    (train, test)
}

fn run_training(seed: u64, epochs: usize, frozen: bool, train_set: &Dataset) -> Checkpoint {
    let pyramid = experiment_pyramid();
    let mut model = FcnModel::init(experiment_topology(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let config = NbnlConfig::new(10.0, 2, 4).unwrap();
    let mut bank = initialize_bank(&model, &pyramid, train_set, config, 8, seed).unwrap();
    train(
        &mut model,
        &mut bank,
        &pyramid,
        train_set,
        &experiment_config(seed, epochs, frozen),
    )
    .unwrap();
    Checkpoint {
        model,
        bank,
        pyramid,
        epoch: epochs,
        seed,
    }
}

fn eval(ckpt: &Checkpoint, data: &Dataset) -> EvalReport {
    evaluate(&ckpt.model, &ckpt.bank, &ckpt.pyramid, data).unwrap()
}

fn end_to_end_vs_frozen(first: &mut Option<(Checkpoint, Dataset)>) -> Outcome {
    let start = Instant::now();
    let (mut e2e, mut frozen) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let (train_set, test_set) = experiment_data(seed);
        let trained = run_training(seed, 30, false, &train_set);
        let fixed = run_training(seed, 30, true, &train_set);
        e2e.push(eval(&trained, &test_set).accuracy);
        frozen.push(eval(&fixed, &test_set).accuracy);
        if seed == 0 {
            *first = Some((trained, test_set));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (me, mf) = (mean(&e2e), mean(&frozen));
    let elapsed = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ");
    check(
        me >= 0.90 && me > mf && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "end-to-end mean {me:.3} [{}] >= 0.90 and > frozen mean {mf:.3} [{}]; {:.0}s <= 900s",
            fmt(&e2e),
            fmt(&frozen),
            elapsed.as_secs_f64()
        ),
    )
}

fn timing_shape() -> Outcome {
    let model = FcnModel::init(FcnTopology::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let data = generate_synthetic_dataset(&SynthConfig {
        images_per_class: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let images: Vec<Image> = data.items().iter().map(|s| s.image.clone()).collect();
    let rows = run_timing_sweep(&images, &[16, 52, 110], 5, &model, &PatchExtractor::default()).unwrap();
    let at_110 = &rows[2];
    let ratio = at_110.fc_seconds / at_110.patch_seconds;
    let per: Vec<f64> = rows
        .iter()
        .map(|r| r.seconds_per_descriptor(TimingMode::FullyConvolutional))
        .collect();
    let counts_exact = rows.iter().all(|r| r.fc_count == r.requested_count);
    check(
        at_110.fc_count == 110 && ratio <= 0.5 && per.windows(2).all(|w| w[1] <= w[0]) && counts_exact,
        format!(
            "fc/patch at 110 = {ratio:.3} <= 0.5; fc us/descriptor at 16/52/110 = {:.2}/{:.2}/{:.2} non-increasing; 5 reps, median",
            per[0] * 1e6,
            per[1] * 1e6,
            per[2] * 1e6
        ),
    )
}

fn robustness(first: &Option<(Checkpoint, Dataset)>) -> Outcome {
    let Some((ckpt, test_set)) = first else {
        return Err("no trained model available".into());
    };
    let mut accs = Vec::new();
    for kind in PerturbationKind::ALL {
        let perturbed = test_set.map_images(|img| apply_perturbation(img, kind)).unwrap();
        accs.push((kind, eval(ckpt, &perturbed).accuracy));
    }
    let original = accs
        .iter()
        .find(|(k, _)| *k == PerturbationKind::Original)
        .map(|(_, a)| *a)
        .unwrap();
    let chance = 1.0 / ckpt.bank.classes() as f64;
    let must_beat_chance = [
        PerturbationKind::UpsideDown,
        PerturbationKind::OccluderCentral,
        PerturbationKind::OccluderRight,
        PerturbationKind::TexturedOccluderCentral,
    ];
    let ok = accs.iter().all(|(_, a)| original >= a - 0.02)
        && accs
            .iter()
            .filter(|(k, _)| must_beat_chance.contains(k))
            .all(|(_, a)| *a >= chance);
    let table = accs
        .iter()
        .map(|(k, a)| format!("{k} {a:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        ok,
        format!("{table}; original >= each - 0.02, upside-down/occluders >= {chance:.2}"),
    )
}

fn same_report(a: &EvalReport, b: &EvalReport) -> bool {
    // throughput is wall-clock and excluded
    a.accuracy == b.accuracy
        && a.confusion == b.confusion
        && a.per_class_accuracy == b.per_class_accuracy
        && a.predictions == b.predictions
        && a.descriptors == b.descriptors
}

fn determinism(first: &Option<(Checkpoint, Dataset)>) -> Outcome {
    let (train_set, test_set) = experiment_data(1);
    let a = checkpoint_to_bytes(&run_training(1, 3, false, &train_set), Precision::F64);
    let b = checkpoint_to_bytes(&run_training(1, 3, false, &train_set), Precision::F64);
    let runs_identical = a == b;

    let Some((ckpt, _)) = first else {
        return Err("no trained model available".into());
    };
    let bytes = checkpoint_to_bytes(ckpt, Precision::F64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, ckpt, Precision::F64).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let round_trip = loaded == *ckpt
        && checkpoint_to_bytes(&loaded, Precision::F64) == bytes
        && checkpoint_to_bytes(&checkpoint_from_bytes(&bytes).unwrap(), Precision::F64) == bytes;

    let r1 = eval(&loaded, &test_set);
    let r2 = eval(&loaded, &test_set);
    let evals_identical = same_report(&r1, &r2) && same_report(&r1, &eval(ckpt, &test_set));
    check(
        runs_identical && round_trip && evals_identical,
        format!(
            "two training runs byte-identical: {runs_identical} ({} bytes); checkpoint round trip bit-exact: {round_trip}; repeated evaluation identical: {evals_identical}",
            a.len()
        ),
    )
}

type Criterion<'a> = (&'a str, Box<dyn FnOnce() -> Outcome + 'a>);

fn main() {
    let mut first = None;
    let criteria: Vec<Criterion> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("nbnn oracle equivalence", Box::new(nbnn_oracle)),
        ("jensen bound", Box::new(jensen_bound)),
        ("omega properties", Box::new(omega_properties)),
        ("block equivalence", Box::new(block_equivalence)),
        ("patch/fc equivalence", Box::new(patch_fc_equivalence)),
    ];
    let mut results = Vec::new();
    for (name, run) in criteria {
        results.push((name, run()));
        report(results.len(), results.last().unwrap());
    }
    results.push(("end-to-end beats frozen", end_to_end_vs_frozen(&mut first)));
    report(results.len(), results.last().unwrap());
    results.push(("timing shape", timing_shape()));
    report(results.len(), results.last().unwrap());
    results.push(("robustness sweep", robustness(&first)));
    report(results.len(), results.last().unwrap());
    results.push(("determinism & persistence", determinism(&first)));
    report(results.len(), results.last().unwrap());

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(index: usize, (name, outcome): &(&str, Outcome)) {
    match outcome {
        Ok(detail) => println!("criterion {index:>2} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {index:>2} FAIL  {name}: {detail}"),
    }
}
