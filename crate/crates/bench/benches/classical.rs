use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use trigger_xai::detection::nms;
use trigger_xai::features::{mean_glcm_contrast, otsu_threshold};
use trigger_xai::labeler::{label_image, LfThresholds, LfWeights};
use trigger_xai_bench::{boxes, scene};

fn otsu(c: &mut Criterion) {
    let gray = scene().luminance_mean();
    c.bench_function("otsu 256 levels", |b| b.iter(|| otsu_threshold(black_box(&gray), 256).unwrap()));
    c.bench_function("glcm contrast", |b| b.iter(|| mean_glcm_contrast(black_box(&gray), 8).unwrap()));
}

fn suppression(c: &mut Criterion) {
    let set = boxes(200);
    c.bench_function("nms 200 boxes", |b| b.iter(|| nms(black_box(&set), 0.5).unwrap()));
}

fn labeling(c: &mut Criterion) {
    let img = scene();
    let (t, w) = (LfThresholds::default(), LfWeights::default());
    c.bench_function("label scene", |b| b.iter(|| label_image("scene", black_box(&img), &t, &w).unwrap()));
}

criterion_group!(benches, otsu, suppression, labeling);
criterion_main!(benches);
