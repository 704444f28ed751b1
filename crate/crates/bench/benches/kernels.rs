use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fairseg::data::generate_sample;
use fairseg::metrics::iou_report;
use fairseg::class_stats::split_groups;
use fairseg::{matmul, ConfusionMatrix, DomainConfig, SceneSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(1024, 64, &mut rng);
    let b = random(64, 192, &mut rng);
    c.bench_function("matmul_1024x64x192", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));

    let qkv = random(4 * 256, 192, &mut rng);
    c.bench_function("attention_fwd_bwd_4x256_d64_h4", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(qkv.clone());
            let y = tape.attention(x, 4, 256, 4).unwrap();
            let loss = tape.sum(y);
            black_box(tape.backward(loss).unwrap());
        })
    });

    let logits = random(4 * 4096, 8, &mut rng);
    let labels: Vec<usize> = (0..4 * 4096).map(|_| rng.random_range(0..8)).collect();
    c.bench_function("cross_entropy_fwd_bwd_16k_px", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(logits.clone());
            let loss = tape.cross_entropy(x, fairseg::CeTarget::Index(labels.clone()), None).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn data_and_metrics(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let dom = DomainConfig::target(spec.classes());
    let mut seed = 0u64;
    c.bench_function("generate_sample_64x64", |bench| {
        bench.iter(|| {
            seed += 1;
            black_box(generate_sample(&spec, &dom, seed))
        })
    });

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred: Vec<u8> = (0..64 * 4096).map(|_| rng.random_range(0..8)).collect();
    let truth: Vec<u8> = (0..64 * 4096).map(|_| rng.random_range(0..8)).collect();
    let dist = fairseg::ClassDistribution::from_counts(&[55, 25, 8, 6, 2, 2, 1, 1], 0.0).unwrap();
    let groups = split_groups(&dist, 0.05).unwrap();
    c.bench_function("confusion_and_iou_64_images", |bench| {
        bench.iter(|| {
            let mut cm = ConfusionMatrix::new(8);
            cm.update(black_box(&pred), black_box(&truth)).unwrap();
            black_box(iou_report(&cm, &groups).unwrap())
        })
    });
}

criterion_group!(benches, kernels, data_and_metrics);
criterion_main!(benches);
