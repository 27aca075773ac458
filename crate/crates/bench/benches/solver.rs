use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use pwgee::solver::score_at;
use pwgee::tuning::log_grid;
use pwgee::{
    cv_select, fit_pwgee, generate, CorrelationKind, Example, FitConfig, ModelSpec, Penalty,
    ScenarioSpec, SelectionRule, Weighting,
};

fn scenario(example: Example, n: usize, p: usize) -> (pwgee::LongitudinalDataset, ModelSpec) {
    let spec = ScenarioSpec::new(example, n, p, 17);
    let data = generate(&spec).expect("valid scenario").data;
    let model = ModelSpec::new(
        example.family(),
        CorrelationKind::Independence,
        Weighting::On,
        3,
    );
    (data, model)
}

fn bench_simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    for example in [Example::LinearIcs, Example::PoissonIcs] {
        let spec = ScenarioSpec::new(example, 200, 100, 17);
        group.bench_function(BenchmarkId::from_parameter(example.number()), |b| {
            b.iter(|| generate(black_box(&spec)).unwrap())
        });
    }
    group.finish();
}

fn bench_score(c: &mut Criterion) {
    let mut group = c.benchmark_group("score");
    for p in [20, 100] {
        let (data, model) = scenario(Example::LinearIcs, 200, p);
        let beta = DVector::from_fn(p, |j, _| if j < 4 { 1.0 } else { 0.0 });
        group.bench_with_input(BenchmarkId::new("gaussian", p), &beta, |b, beta| {
            b.iter(|| score_at(&data, &model, black_box(beta)).unwrap())
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(20);
    for (name, example, lambda) in [
        ("gaussian", Example::LinearIcs, 0.2),
        ("poisson", Example::PoissonIcs, 0.1),
    ] {
        let (data, model) = scenario(example, 200, 100);
        let config = FitConfig::new(Penalty::scad(lambda));
        group.bench_function(name, |b| {
            b.iter(|| fit_pwgee(black_box(&data), &model, &config).unwrap())
        });
    }
    group.finish();
}

fn bench_cv(c: &mut Criterion) {
    let mut group = c.benchmark_group("cv");
    group.sample_size(10);
    let (data, model) = scenario(Example::LinearIcs, 100, 20);
    let config = FitConfig::new(Penalty::scad(1.0));
    let grid = log_grid(1.0, 0.1, 5);
    group.bench_function("gaussian_5x4", |b| {
        b.iter(|| cv_select(&data, &model, &config, &grid, SelectionRule::OneSe, 9).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_score, bench_fit, bench_cv);
criterion_main!(benches);
