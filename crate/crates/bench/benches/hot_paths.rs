use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ttal_bench::{phantom, teacher};
use ttal_core::curate::make_plan;
use ttal_core::qe::{estimate_quality, median_vote, QeOptions};
use ttal_core::synth::corrupt_prediction;
use ttal_core::{assd2d, dice, hausdorff95, tta_infer, Aggregator, QualityReport, TtaEnsemble};

fn metrics(c: &mut Criterion) {
    let (_, truth) = phantom(48, 1);
    let pred = corrupt_prediction(&truth, 0.5, 2).unwrap().to_mask();
    let mut g = c.benchmark_group("metrics-48");
    g.bench_function("dice", |b| b.iter(|| dice(black_box(&pred), &truth).unwrap()));
    g.bench_function("hausdorff95", |b| b.iter(|| hausdorff95(black_box(&pred), &truth).unwrap()));
    g.bench_function("assd2d", |b| b.iter(|| assd2d(black_box(&pred), &truth).unwrap()));
    g.finish();
}

fn inference(c: &mut Criterion) {
    let model = teacher(32);
    let (volume, _) = phantom(48, 3);
    let ensemble = TtaEnsemble::enumerate(16, 16).unwrap();
    let qe = QeOptions { aggregator: Aggregator::Mean, include_identity: true };
    let mut g = c.benchmark_group("inference-48");
    g.sample_size(10);
    g.bench_function("predict", |b| b.iter(|| model.predict(black_box(&volume))));
    g.bench_function("tta-16", |b| b.iter(|| tta_infer(&model, black_box(&volume), &ensemble).unwrap()));
    let preds = tta_infer(&model, &volume, &ensemble).unwrap();
    g.bench_function("median-and-quality", |b| {
        b.iter(|| {
            let sm = median_vote(black_box(&preds)).unwrap();
            estimate_quality("c", &preds, &sm, qe, None).unwrap()
        })
    });
    g.finish();
}

fn selection(c: &mut Criterion) {
    let reports: Vec<QualityReport> = (0..1000)
        .map(|i| QualityReport {
            case_id: format!("case{i:04}"),
            estimated_dice: ((i * 7919) % 1000) as f64 / 1000.0,
            per_aug_dice: vec![],
            aggregator: Aggregator::Mean,
            roi: None,
            ensemble_size: 16,
        })
        .collect();
    c.bench_function("make-plan-1000", |b| b.iter(|| make_plan(black_box(&reports), 10, 40, Some(0.85)).unwrap()));
}

criterion_group!(benches, metrics, inference, selection);
criterion_main!(benches);
