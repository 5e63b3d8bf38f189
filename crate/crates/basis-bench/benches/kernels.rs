use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use basis_bench::{desk_model_and_batch, random_matrix};
use basis_core::layers::{
    basis_dense_backward, basis_dense_forward, dense_backward_exact, dense_forward_exact,
    DenseParams,
};
use basis_core::model::Execution;
use basis_core::sketch::{apply_sketch, build_plan};

fn bench_matmul(c: &mut Criterion) {
    let a = random_matrix(64, 64, 1);
    let b = random_matrix(64, 256, 2);
    c.bench_function("matmul 64x64x256", |bencher| {
        bencher.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn bench_sketch(c: &mut Criterion) {
    let x = random_matrix(64, 256, 3);
    let mut group = c.benchmark_group("apply_sketch 64x256");
    for rank in [1usize, 8, 32, 64] {
        let plan = build_plan(64, rank, 4);
        group.bench_with_input(BenchmarkId::from_parameter(rank), &plan, |bencher, plan| {
            bencher.iter(|| apply_sketch(black_box(&x), plan).unwrap())
        });
    }
    group.finish();
}

fn bench_dense_backward(c: &mut Criterion) {
    let x = random_matrix(64, 256, 5);
    let dy = random_matrix(64, 64, 6);
    let params = DenseParams::new(random_matrix(256, 64, 7), None).unwrap();
    let mut group = c.benchmark_group("dense backward 64x256->64");

    let (_, exact_cache) = dense_forward_exact(&x, &params).unwrap();
    group.bench_function("exact", |bencher| {
        bencher.iter(|| dense_backward_exact(black_box(&dy), &exact_cache, &params).unwrap())
    });
    for rank in [8usize, 64] {
        let (_, cache) = basis_dense_forward(&x, &params, rank, 0.0, 1e-8, 8).unwrap();
        group.bench_with_input(BenchmarkId::new("sketched", rank), &cache, |bencher, cache| {
            bencher.iter(|| basis_dense_backward(black_box(&dy), cache, &params).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let (model, inputs, targets) = desk_model_and_batch();
    let mut group = c.benchmark_group("loss_and_grads desk model");
    group.sample_size(20);
    group.bench_function("exact", |bencher| {
        bencher.iter(|| {
            model
                .loss_and_grads(black_box(&inputs), &targets, &Execution::exact(), 0)
                .unwrap()
        })
    });
    group.bench_function("basis r=8", |bencher| {
        bencher.iter(|| {
            model
                .loss_and_grads(black_box(&inputs), &targets, &Execution::basis(8), 0)
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_sketch, bench_dense_backward, bench_train_step);
criterion_main!(benches);
