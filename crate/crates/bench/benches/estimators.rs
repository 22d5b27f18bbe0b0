use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedm_bench::shards;
use fedm_core::algorithms::{self, Algorithm, RunConfig};
use fedm_core::harness::{run_experiment, presets::preset, ExperimentSpec};
use fedm_core::model::Family;
use fedm_core::privacy::{calibrate_clip_bound, PrivacyBudget};
use fedm_core::theory::{upper_bound, RateInputs, TheoryConstants};

fn estimators(c: &mut Criterion) {
    let (spec, sh) = shards(Family::Logistic, 5, 20, 110, 1);
    let clip = calibrate_clip_bound(&sh, &spec).unwrap();
    let mut group = c.benchmark_group("private_run_m20_n110");
    for alg in Algorithm::ALL {
        let cfg = RunConfig {
            mu: PrivacyBudget { mu: 6.0 },
            clip,
            ..RunConfig::defaults(alg)
        };
        group.bench_with_input(BenchmarkId::from_parameter(alg), &cfg, |b, cfg| {
            b.iter(|| algorithms::run(black_box(&sh), &spec, cfg).unwrap())
        });
    }
    group.finish();
}

fn clip_calibration(c: &mut Criterion) {
    let (spec, sh) = shards(Family::Logistic, 5, 60, 400, 2);
    c.bench_function("calibrate_clip_m60_n400", |b| b.iter(|| calibrate_clip_bound(black_box(&sh), &spec).unwrap()));
}

fn theory(c: &mut Criterion) {
    let inputs = RateInputs {
        sizes: (0..140).map(|i| 100 + 4 * i).collect(),
        d: 5,
        mu: 6.0,
        k: 50,
        r: 2,
        tau1: 0.16,
        tau2: 1.25,
    };
    let tc = TheoryConstants::default();
    c.bench_function("upper_bound_fedavg_m140", |b| b.iter(|| upper_bound(Algorithm::FedAvg, black_box(&inputs), &tc).unwrap()));
}

fn sweep(c: &mut Criterion) {
    let spec = preset("fig1", Some(2)).unwrap().remove(0);
    let spec = ExperimentSpec {
        axis_values: vec![20.0],
        ..spec
    };
    let mut group = c.benchmark_group("harness");
    group.sample_size(10);
    group.bench_function("fig1_n30_m20_two_reps", |b| b.iter(|| run_experiment(black_box(&spec)).unwrap()));
    group.finish();
}

criterion_group!(benches, estimators, clip_calibration, theory, sweep);
criterion_main!(benches);
