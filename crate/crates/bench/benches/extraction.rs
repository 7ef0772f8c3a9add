use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fcnbnl_bench::{random_model, sample_image};
use fcnbnl_core::timing::{
    extract_fc_mode, extract_patch_mode, fc_grids_for_count, fc_resolutions, PatchExtractor, MAX_FC_SCALES,
};

fn extraction(c: &mut Criterion) {
    let image = sample_image();
    let model = random_model(0);
    let extractor = PatchExtractor::default();
    let mut group = c.benchmark_group("extraction");
    for count in [16, 52, 110] {
        group.throughput(Throughput::Elements(count as u64));
        group.bench_with_input(BenchmarkId::new("patch", count), &count, |b, &count| {
            b.iter(|| extract_patch_mode(black_box(&image), &extractor, &model, count).unwrap())
        });
        let resolutions = fc_resolutions(model.topology(), &fc_grids_for_count(count, MAX_FC_SCALES));
        group.bench_with_input(BenchmarkId::new("fc", count), &resolutions, |b, res| {
            b.iter(|| extract_fc_mode(black_box(&image), &model, res).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, extraction);
criterion_main!(benches);
