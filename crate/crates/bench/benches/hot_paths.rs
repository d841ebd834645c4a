use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use looklab_core::detect::average_precision;
use looklab_core::embed::{mine_semi_hard, total_loss, total_loss_grad, TripletLossConfig};
use looklab_core::retrieve::{CatalogEntry, CatalogIndex, ScoringMode};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn vecs(rng: &mut StdRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn losses(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let v = vecs(&mut rng, 3, 128);
    let cfg = TripletLossConfig::default();
    c.bench_function("total_loss d=128", |b| b.iter(|| total_loss(black_box(&v[0]), &v[1], &v[2], &cfg).unwrap()));
    c.bench_function("total_loss_grad d=128", |b| {
        b.iter(|| total_loss_grad(black_box(&v[0]), &v[1], &v[2], &cfg).unwrap())
    });
}

fn mining(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let emb = vecs(&mut rng, 64, 64);
    let labels: Vec<u32> = (0..64).map(|i| i / 4).collect();
    c.bench_function("mine_semi_hard batch=64 all anchors", |b| {
        b.iter(|| {
            for a in 0..emb.len() {
                black_box(mine_semi_hard(a, &emb, &labels, 0.2).unwrap());
            }
        })
    });
}

fn retrieval(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(3);
    let mut group = c.benchmark_group("top_k");
    for n in [1_000usize, 10_000] {
        let entries: Vec<CatalogEntry> = (0..n)
            .map(|i| CatalogEntry {
                product_id: format!("p{i:06}"),
                article_type: "T-shirts".into(),
                broad_category: "Topwear".into(),
                embedding: (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                metadata: Default::default(),
            })
            .collect();
        let index = CatalogIndex::build(entries).unwrap();
        let query: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        for mode in [ScoringMode::Cosine, ScoringMode::Euclidean, ScoringMode::Combined] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), n), &n, |b, _| {
                b.iter(|| index.top_k(black_box(&query), "T-shirts", 14, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(4);
    let flags: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.4)).collect();
    let num_gt = flags.iter().filter(|f| **f).count() + 100;
    c.bench_function("average_precision 10k detections", |b| {
        b.iter(|| average_precision(black_box(&flags), num_gt))
    });
}

criterion_group!(benches, losses, mining, retrieval, metrics);
criterion_main!(benches);
