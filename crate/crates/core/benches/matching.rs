use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use distillkit::envs::{collect_random, EnvKind};
use distillkit::fqi::TransitionBatch;
use distillkit::linreg::{LossMatcher, RegressorEnsemble};
use distillkit::par;
use distillkit::rl_distill::{bellman_loss, init_synthetic, sample_ensemble, BellmanMatcher, QArch};
use distillkit::rng::rng_from_seed;

fn supervised(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let train = DMatrix::from_fn(1280, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
    let syn = DMatrix::from_fn(50, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ens = RegressorEnsemble::sample(100, 11, 2).unwrap();
    let g = ens.matrix();
    let loss = |j: usize| (&train * g.column(j)).norm_squared() / train.nrows() as f64;

    let mut group = c.benchmark_group("supervised_train_losses");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", 100), |b| {
        b.iter(|| black_box(par::map_range(g.ncols(), loss)))
    });
    group.bench_function(BenchmarkId::new("sequential", 100), |b| {
        b.iter(|| black_box((0..g.ncols()).map(loss).collect::<Vec<_>>()))
    });
    group.finish();

    let matcher = LossMatcher::new(&train, &ens).unwrap();
    c.bench_function("supervised_objective_and_gradient", |b| {
        b.iter(|| black_box(matcher.objective_and_gradient(&syn).unwrap()))
    });
}

fn bellman(c: &mut Criterion) {
    let data = collect_random(EnvKind::Cartpole, 2000, 0.99, 3).unwrap();
    let batch = TransitionBatch::from(&data);
    let arch = QArch::Mlp { hidden: (10, 10) };
    let ens = sample_ensemble(&arch, 4, 2, 20, 1.0, 4).unwrap();

    let mut group = c.benchmark_group("bellman_train_losses");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", 20), |b| {
        b.iter(|| black_box(par::map_slice(&ens, |q| bellman_loss(&batch, q, 0.99).unwrap())))
    });
    group.bench_function(BenchmarkId::new("sequential", 20), |b| {
        b.iter(|| black_box(ens.iter().map(|q| bellman_loss(&batch, q, 0.99).unwrap()).collect::<Vec<_>>()))
    });
    group.finish();

    let matcher = BellmanMatcher::new(&batch, ens, 0.99).unwrap();
    let syn = init_synthetic(&data, 50, 5).unwrap();
    c.bench_function("bellman_objective_and_gradient", |b| {
        b.iter(|| black_box(matcher.objective_and_gradient(&syn).unwrap()))
    });
}

criterion_group!(benches, supervised, bellman);
criterion_main!(benches);
