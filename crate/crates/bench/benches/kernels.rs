use al_forge_bench::{clustered_points, random_tensor};
use al_forge_core::data::{generate_sample, DatasetSpec};
use al_forge_core::losses::{total_loss, LabeledRef, LossConfig};
use al_forge_core::model::{ArchConfig, ModelParams};
use al_forge_core::query::{weighted_kmeans, KMeansConfig};
use al_forge_core::Tape;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (ch, f, size) in [(3, 8, 64), (48, 16, 32), (24, 8, 64)] {
        let x = random_tensor(&[1, ch, size, size], 1);
        let k = random_tensor(&[f, ch, 3, 3], 2);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}to{f}@{size}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let kv = tape.param(k.clone());
                let y = tape.conv2d(xv, kv, 1, 1).unwrap();
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap())
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let spec = DatasetSpec::default();
    let (a, _) = generate_sample(&spec, 0, 11);
    let (u, _) = generate_sample(&spec, 1, 12);
    let target = a.mask.to_target();
    let params = ModelParams::init(&ArchConfig::default(), 0);
    c.bench_function("predict 64x64", |b| b.iter(|| black_box(params.predict(&a.image).unwrap())));
    c.bench_function("total_loss fwd+bwd 64x64 (1 labeled + 1 unlabeled)", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let lab = [LabeledRef {
                image: &a.image,
                target: &target,
            }];
            let loss = total_loss(&mut tape, &vars, &lab, &[&u.image], &LossConfig::default()).unwrap();
            black_box(tape.backward(loss.total).unwrap())
        })
    });
}

fn kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_kmeans");
    for n in [200, 1000] {
        let (points, weights) = clustered_points(n, 32, 10, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(weighted_kmeans(&points, &weights, 10, 0, &KMeansConfig::default()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, model, kmeans);
criterion_main!(benches);
