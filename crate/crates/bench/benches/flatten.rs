use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lidarseg::projection::{flatten_scatter, projection_matrix, random_assignment, DEFAULT_ORACLE_CAP};
use lidarseg::tensor::matmul;
use lidarseg_bench::features;

// the dense arm times only the product; building M is excluded
fn flatten(c: &mut Criterion) {
    let mut group = c.benchmark_group("flatten");
    group.sample_size(10);
    let (hw, ch) = (4096, 64);
    for n in [10_000usize, 100_000] {
        let assign = random_assignment(n, hw, 3).unwrap();
        let x = features(n, ch, 4);
        group.bench_with_input(BenchmarkId::new("scatter", n), &n, |b, _| {
            b.iter(|| flatten_scatter(&x, &assign, hw).unwrap())
        });
        let m = projection_matrix::<f32>(&assign, hw, DEFAULT_ORACLE_CAP).unwrap();
        group.bench_with_input(BenchmarkId::new("matmul", n), &n, |b, _| b.iter(|| matmul(&m, &x).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, flatten);
criterion_main!(benches);
