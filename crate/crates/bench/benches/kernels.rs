use std::hint::black_box;

use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use touchedit_core::datagen::{generate_samples, DatasetConfig};
use touchedit_core::editor::{sample_edit, EditorConfig, EditorModel};
use touchedit_core::geometry::{derive_size_stats, quantize_coord, COORD_BINS};
use touchedit_core::placement::{build_vocabulary, predict_placement, PlacementConfig, PlacementModel};
use touchedit_core::rng::seeded;
use touchedit_core::{iou, NormalizedBBox};

fn geometry(c: &mut Criterion) {
    let a = NormalizedBBox::new(0.4, 0.5, 0.3, 0.2).unwrap();
    let b = NormalizedBBox::new(0.5, 0.45, 0.2, 0.4).unwrap();
    c.bench_function("iou", |bn| bn.iter(|| iou(black_box(&a), black_box(&b))));
    c.bench_function("quantize_coord", |bn| bn.iter(|| quantize_coord(black_box(0.437), COORD_BINS)));
}

fn models(c: &mut Criterion) {
    let samples = generate_samples(&DatasetConfig::default(), 4, 1, "b").unwrap();
    let corpus: Vec<&str> = samples.iter().flat_map(|s| [s.instruction.as_str(), s.reasoning.as_str()]).collect();
    let stats = derive_size_stats(samples.iter().map(|s| &s.gt_bbox)).unwrap();
    let s = &samples[0];

    let placement = PlacementModel::new(
        PlacementConfig::default(),
        build_vocabulary(corpus.clone()),
        stats,
        DType::F32,
        &mut seeded(1),
    )
    .unwrap();
    c.bench_function("placement_generate", |bn| {
        bn.iter(|| predict_placement(&placement, &s.source_image, &s.instruction, &s.touch).unwrap())
    });

    let mut cfg = EditorConfig::default();
    cfg.schedule.steps = 10;
    let editor = EditorModel::new(cfg, EditorModel::vocabulary(corpus), DType::F32, &mut seeded(2)).unwrap();
    let mut group = c.benchmark_group("editor");
    group.sample_size(10);
    group.bench_function("sample_10_steps", |bn| {
        bn.iter(|| sample_edit(&editor, &s.source_image, &s.instruction, &s.gt_bbox, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, models);
criterion_main!(benches);
