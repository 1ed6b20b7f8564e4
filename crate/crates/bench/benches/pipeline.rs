use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use neurodesc::cnn::{CnnConfig, SmallCnn};
use neurodesc::describe::rerank;
use neurodesc::edit::{gen_spurious_dataset, SpuriousDatasetSpec};
use neurodesc::featpool::{encode_image, masked_pool, FeatureMap, FilterBankBackbone};
use neurodesc::keywords::KeywordSet;
use neurodesc::{Classifier, Grid, Mask, UnitSet};
use neurodesc_bench::{bundle, captioner};

fn decoding(c: &mut Criterion) {
    let cap = captioner(30, 24);
    let b = bundle(15, 24, 1);
    c.bench_function("beam_candidates B=10", |bench| {
        bench.iter(|| cap.beam_candidates(black_box(&b), 10, 15).unwrap())
    });
    let cands = cap.beam_candidates(&b, 50, 15).unwrap();
    c.bench_function("rerank 50 candidates", |bench| bench.iter(|| rerank(black_box(cands.clone()), 0.2)));
}

fn features(c: &mut Criterion) {
    let f = FeatureMap::new(64, 56, 56, (0..64 * 56 * 56).map(|i| (i % 97) as f32).collect()).unwrap();
    let m = Grid::filled(56, 56, 0.5);
    c.bench_function("masked_pool 64x56x56", |bench| bench.iter(|| masked_pool(black_box(&f), black_box(&m)).unwrap()));
    let bb = FilterBankBackbone::new(32);
    let img = neurodesc::RgbImage::filled(32, 32, [120, 30, 200]);
    let mask = Mask::filled(32, 32, true);
    c.bench_function("filter bank encode 32x32", |bench| bench.iter(|| encode_image(&bb, black_box(&img), &mask).unwrap()));
}

fn classifier(c: &mut Criterion) {
    let data = gen_spurious_dataset(&SpuriousDatasetSpec {
        train_per_class: 10,
        test_per_class: 13,
        ..SpuriousDatasetSpec::default()
    })
    .unwrap();
    let cnn = SmallCnn::new(
        "bench",
        CnnConfig {
            input_size: 32,
            conv1_channels: 8,
            conv2_channels: 64,
            classes: 10,
        },
        0,
    )
    .unwrap();
    let none = UnitSet::new();
    c.bench_function("cnn predict 130 images", |bench| {
        bench.iter(|| cnn.predict(black_box(&data.test.images), &none).unwrap())
    });
}

fn keywords(c: &mut Criterion) {
    let k = KeywordSet::text();
    c.bench_function("keyword match", |bench| bench.iter(|| k.matches(black_box("white words and letters on dark signs"))));
}

criterion_group!(benches, decoding, features, classifier, keywords);
criterion_main!(benches);
