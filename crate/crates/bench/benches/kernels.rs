use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cgrow_bench::{desk_batch, desk_model, desk_params, random_matrix};
use cgrow_core::growth::{apply, GrowthOp};
use cgrow_core::io::RunConfig;
use cgrow_core::numerics::Rng;
use cgrow_core::trainer::{optimizer_step, OptimizerConfig, OptimizerState};
use cgrow_core::transformer::{mlm_loss, FfnMode};
use cgrow_core::DataConfig;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 128] {
        let a = random_matrix(n, 32, 1);
        let b = random_matrix(32, 64, 2);
        let bt = random_matrix(64, 32, 3);
        g.bench_with_input(BenchmarkId::new("nn", n), &n, |bench, _| bench.iter(|| black_box(&a).matmul(&b).unwrap()));
        g.bench_with_input(BenchmarkId::new("nt", n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul_nt(&bt).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    let batch = desk_batch(16);
    let opt = OptimizerConfig::default();
    for (name, model) in [
        ("full_l4", desk_model(4, FfnMode::Full, 1)),
        ("shared_pooled_l4", desk_model(4, FfnMode::Shared { k: 2 }, 2)),
    ] {
        let mut params = desk_params(&model);
        let mut state = OptimizerState::new(&params, &model).unwrap();
        let rng = Rng::new(0);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let (loss, grads) = mlm_loss(&batch, &params, &model, &rng, true).unwrap();
                optimizer_step(&mut params, &grads, &mut state, 1e-4, &opt).unwrap();
                loss
            })
        });
    }
    g.finish();
}

fn growth(c: &mut Criterion) {
    let model = desk_model(4, FfnMode::Shared { k: 2 }, 2);
    let params = desk_params(&model);
    let data = DataConfig::desk();
    let ops = [GrowthOp::StackDepth { target_layers: 8 }, GrowthOp::UnshareFfn, GrowthOp::Unpool];
    c.bench_function("growth/stack_unshare_unpool", |b| {
        b.iter(|| apply(black_box(&ops), &params, &model, &data).unwrap())
    });
}

fn cost_plan(c: &mut Criterion) {
    let config = RunConfig::preset("compound_base").unwrap().unwrap();
    let opts = config.cost_options();
    c.bench_function("cost/plan_compound", |b| b.iter(|| black_box(&config).plan(opts).unwrap()));
}

criterion_group!(benches, matmul, train_step, growth, cost_plan);
criterion_main!(benches);
