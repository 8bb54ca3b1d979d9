use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use scsi_bench::{network, rng, uniform_points};
use scsi_core::gaussian::{scsi_update, wishart_sample};
use scsi_core::{
    pushforward, w2sq_exact, Drift, GaussianModel, InterpolantBatch, ResidualKind, SampleSet, Schedule, Scheme,
    TransportConfig,
};

fn regressor(c: &mut Criterion) {
    let mut group = c.benchmark_group("regressor");
    for hidden in [64, 128] {
        let net = network(hidden);
        let x = uniform_points(256, 2, 1);
        let t = vec![0.5; 256];
        group.bench_with_input(BenchmarkId::new("forward_256", hidden), &hidden, |b, _| {
            b.iter(|| net.forward_batch(x.view(), &t, None).unwrap())
        });
        let sched = Schedule::ode_linear();
        let x1 = uniform_points(256, 2, 2);
        let batch = InterpolantBatch::sample(x.view(), x1.view(), None, &sched, 1e-3, &mut rng(3)).unwrap();
        group.bench_with_input(BenchmarkId::new("backward_256", hidden), &hidden, |b, _| {
            b.iter(|| net.backward(&batch, ResidualKind::Drift, &sched).unwrap())
        });
    }
    group.finish();
}

fn transport(c: &mut Criterion) {
    let net = network(64);
    let ys = uniform_points(256, 2, 4);
    let sched = Schedule::ode_linear();
    let mut group = c.benchmark_group("pushforward_256");
    for (name, cfg) in [
        ("euler_32", TransportConfig::ode(32, Scheme::Euler)),
        ("heun_64", TransportConfig::ode(64, Scheme::Heun)),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| pushforward(Drift::Velocity(&net), ys.view(), None, &mut rng(5), &cfg, &sched).unwrap())
        });
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("w2sq_exact");
    group.sample_size(10);
    for n in [250, 1000] {
        let a = SampleSet::new(uniform_points(n, 2, 6)).unwrap();
        let b = SampleSet::new(uniform_points(n, 2, 7)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| w2sq_exact(&a, &b).unwrap()));
    }
    group.finish();
}

fn gaussian(c: &mut Criterion) {
    let d = 8;
    let truth = GaussianModel::centered(wishart_sample(d, 2 * d, 1.0, &mut rng(8)).unwrap()).unwrap();
    let start = GaussianModel::centered(DMatrix::identity(d, d)).unwrap();
    c.bench_function("scsi_update_d8", |b| b.iter(|| scsi_update(&start, &truth, 0.5).unwrap()));
}

criterion_group!(benches, regressor, transport, assignment, gaussian);
criterion_main!(benches);
