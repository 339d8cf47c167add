use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedhft_bench::{random_matrix, AggregationCase};
use fedhft_core::adapter::fisher_importance;
use fedhft_core::federation::aggregate_cluster;
use fedhft_core::numerics::svd_truncate;
use fedhft_core::RngStream;

fn truncation(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd_truncate");
    for d in [32, 64, 128] {
        let m = random_matrix(d, d, 3);
        group.bench_with_input(BenchmarkId::from_parameter(d), &m, |b, m| {
            b.iter(|| svd_truncate(black_box(m), 16).unwrap());
        });
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregate_cluster");
    for n in [5, 20] {
        let case = AggregationCase::new(64, 16, n, 0.5, 11);
        let refs = case.update_refs();
        group.bench_with_input(BenchmarkId::new("clients", n), &n, |b, _| {
            b.iter(|| aggregate_cluster(&case.current, black_box(&refs), &case.weights, case.rank, 0.02, RngStream::new(0, 0)).unwrap());
        });
    }
    group.finish();
}

fn importance(c: &mut Criterion) {
    let case = AggregationCase::new(256, 32, 1, 0.0, 5);
    c.bench_function("fisher_importance/256x256", |b| b.iter(|| fisher_importance(black_box(&case.current)).unwrap()));
}

criterion_group!(benches, truncation, aggregation, importance);
criterion_main!(benches);
