use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use unibind_core::train::{batch_gradient, random_gradcheck_setup};
use unibind_core::{similarity_matrix, top_k, EmbeddingMatrix, InfoNce};

fn random_matrix(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingMatrix::new(dim, data, None).unwrap()
}

fn bench_top_k(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_k");
    for &n in &[1_000usize, 10_000] {
        let keys = random_matrix(n, 512, 1);
        let query = random_matrix(1, 512, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| top_k(black_box(query.row(0)), black_box(&keys), 50).unwrap())
        });
    }
    group.finish();
}

fn bench_similarity(c: &mut Criterion) {
    let q = random_matrix(200, 256, 3);
    let k = random_matrix(500, 256, 4);
    c.bench_function("similarity_matrix_200x500x256", |b| {
        b.iter(|| similarity_matrix(black_box(&q), black_box(&k)).unwrap())
    });
}

fn bench_info_nce(c: &mut Criterion) {
    let mut group = c.benchmark_group("info_nce");
    for &batch in &[16usize, 64] {
        let a = random_matrix(batch, 128, 5).normalized().unwrap();
        let t = random_matrix(batch, 128, 6).normalized().unwrap();
        let obj = InfoNce::new(0.07, false).unwrap();
        group.bench_with_input(BenchmarkId::new("loss_and_grad", batch), &batch, |b, _| {
            b.iter(|| obj.evaluate(black_box(a.data()), black_box(t.data()), batch, 128))
        });
    }
    let (adapter, pairs, kb) = random_gradcheck_setup(64, 64, 32, 7).unwrap();
    let refs: Vec<_> = pairs.iter().collect();
    let obj = InfoNce::new(0.07, false).unwrap();
    group.bench_function("adapter_batch_gradient_32x64", |b| {
        b.iter(|| batch_gradient(black_box(&adapter), &refs, &kb, obj).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_top_k, bench_similarity, bench_info_nce);
criterion_main!(benches);
