use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dos_core::clustering::{kmeans_normalized, KMeansParams};
use dos_core::eval::auroc;
use dos_core::model::MlpModel;
use dos_core::numeric::{Matrix, Rng};
use dos_core::sampling::{sample_dos, CandidateBatch};

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn bench_kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans_normalized");
    let mut rng = Rng::new(1);
    for &(n, k) in &[(256, 64), (1024, 64)] {
        let x = gaussian(n, 64, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{k}")), &x, |b, x| {
            b.iter(|| {
                let mut r = Rng::new(7);
                kmeans_normalized(black_box(x), &KMeansParams::new(k), &mut r).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_auroc(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let id: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
    let ood: Vec<f64> = (0..10_000).map(|_| rng.normal() + 1.0).collect();
    c.bench_function("auroc_10k", |b| b.iter(|| auroc(black_box(&id), black_box(&ood)).unwrap()));
}

fn bench_mlp(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let model = MlpModel::new(&[2, 64, 64, 4], &mut rng).unwrap();
    let x = gaussian(320, 2, &mut rng);
    c.bench_function("mlp_forward_320", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    let (_, cache) = model.forward_cached(&x).unwrap();
    let grad = gaussian(320, 4, &mut rng);
    c.bench_function("mlp_backward_320", |b| {
        b.iter(|| model.backward(black_box(&cache), black_box(&grad)).unwrap())
    });
}

fn bench_dos_select(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let features = gaussian(256, 64, &mut rng);
    let scores: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
    let candidates = CandidateBatch::new(features.clone(), (0..256).collect(), scores).unwrap();
    c.bench_function("dos_select_256_k64", |b| {
        b.iter(|| {
            let mut r = Rng::new(9);
            let clusters = kmeans_normalized(&features, &KMeansParams::new(64), &mut r).unwrap();
            sample_dos(black_box(&candidates), &clusters).unwrap()
        })
    });
}

criterion_group!(benches, bench_kmeans, bench_auroc, bench_mlp, bench_dos_select);
criterion_main!(benches);
