use bevlift_bench::camera_workload;
use bevlift_core::view_transform::view_transform;
use bevlift_core::PoolingKernel;
use criterion::{criterion_group, criterion_main, Criterion};

fn lift_splat(c: &mut Criterion) {
    let w = camera_workload([704, 256], 16, 16);
    let mut group = c.benchmark_group("view_transform");
    group.sample_size(10);
    for (name, kernel) in [("naive", PoolingKernel::Naive), ("sorted", PoolingKernel::Sorted)] {
        group.bench_function(name, |b| {
            b.iter(|| view_transform(&w.cameras, &w.inputs, &w.grid, &w.bins, kernel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, lift_splat);
criterion_main!(benches);
