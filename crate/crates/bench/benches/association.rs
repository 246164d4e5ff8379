use std::hint::black_box;

use bcfl_core::association::{best_assignment, m_best_exact, m_best_heuristic, CostMatrix};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matrix(clients: usize, clusters: usize) -> CostMatrix {
    let entries = (0..clients * clusters).map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract().abs() * 10.0).collect();
    CostMatrix::new(clients, clusters, entries).unwrap()
}

fn k_best(c: &mut Criterion) {
    let mut group = c.benchmark_group("k_best");
    for &(clients, clusters) in &[(10, 5), (40, 4), (100, 10)] {
        let l = matrix(clients, clusters);
        let id = format!("{clients}x{clusters}");
        group.bench_with_input(BenchmarkId::new("best", &id), &l, |b, l| b.iter(|| best_assignment(black_box(l))));
        for m in [6, 64] {
            group.bench_with_input(BenchmarkId::new(format!("exact_m{m}"), &id), &l, |b, l| {
                b.iter(|| m_best_exact(black_box(l), m))
            });
            group.bench_with_input(BenchmarkId::new(format!("heuristic_m{m}"), &id), &l, |b, l| {
                b.iter(|| m_best_heuristic(black_box(l), m))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, k_best);
criterion_main!(benches);
