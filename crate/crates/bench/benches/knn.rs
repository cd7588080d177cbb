use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lidarseg::KdTree;
use lidarseg_bench::uniform_cloud;

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    group.sample_size(10);
    for n in [10_000usize, 100_000] {
        let cloud = uniform_cloud(n, 1);
        group.bench_with_input(BenchmarkId::new("build", n), &cloud, |b, cloud| {
            b.iter(|| KdTree::build(cloud).unwrap())
        });
        let tree = KdTree::build(&cloud).unwrap();
        let mut counts = vec![1, rayon_threads()];
        counts.dedup();
        for threads in counts {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            group.bench_with_input(BenchmarkId::new(format!("query_k16_t{threads}"), n), &tree, |b, tree| {
                b.iter(|| pool.install(|| tree.query_knn_indexed(16, true).unwrap()))
            });
        }
    }
    group.finish();
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

criterion_group!(benches, knn);
criterion_main!(benches);
