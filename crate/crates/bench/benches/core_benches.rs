use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use milsurv_core::abmil::{fit_abmil, nll_on_tape, AbmilConfig, AbmilModel, TrainConfig};
use milsurv_core::cohort::{synth_cohorts, SynthSpec};
use milsurv_core::survival::{c_index, RiskScore, SurvivalLabel};
use milsurv_core::GradientTape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_c_index(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 500;
    let risks: Vec<RiskScore> = (0..n).map(|_| RiskScore(rng.gen_range(-1.0..1.0))).collect();
    let labels: Vec<SurvivalLabel> = (0..n)
        .map(|_| SurvivalLabel::new(rng.gen_range(0..10), rng.gen_bool(0.7)))
        .collect();
    c.bench_function("c_index_500", |b| {
        b.iter(|| c_index(black_box(&risks), black_box(&labels)).unwrap())
    });
}

fn bench_abmil_forward(c: &mut Criterion) {
    let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 5, 2)).unwrap();
    let bag = &cohorts[0].bags[0];
    let model = AbmilModel::init(AbmilConfig::desk(32, 10), 3);
    c.bench_function("abmil_forward", |b| {
        b.iter(|| model.forward(black_box(bag)).unwrap())
    });
}

fn bench_abmil_backward(c: &mut Criterion) {
    let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 5, 2)).unwrap();
    let cohort = &cohorts[0];
    let model = AbmilModel::init(AbmilConfig::desk(32, 10), 3);
    c.bench_function("abmil_backward", |b| {
        b.iter(|| {
            let mut tape = GradientTape::new();
            let nodes = model.forward_tape(&mut tape, &cohort.bags[0]).unwrap();
            let loss = nll_on_tape(&mut tape, nodes.hazards, &cohort.labels[0]).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 40, 2)).unwrap();
    let cohort = &cohorts[0];
    let idx: Vec<usize> = (0..cohort.bags.len()).collect();
    let cfg = TrainConfig {
        epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    c.bench_function("abmil_train_epoch_40", |b| {
        b.iter(|| {
            let mut model = AbmilModel::init(AbmilConfig::desk(32, 10), 3);
            fit_abmil(&mut model, cohort, &idx, &cfg).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_c_index,
    bench_abmil_forward,
    bench_abmil_backward,
    bench_train_epoch
);
criterion_main!(benches);
