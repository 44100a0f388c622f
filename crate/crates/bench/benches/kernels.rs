use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use soc_core::control::{Activation, ControlFunction, MlpControl};
use soc_core::losses::{compute, LossInput, LossKind, LossOptions};
use soc_core::problem::{make_setting, Setting, SettingConfig};
use soc_core::reparam::{ReparamFamily, ReparamForm};
use soc_core::simulate::{simulate, TimeGrid};

fn simulation(c: &mut Criterion) {
    let (p, _) = make_setting(&SettingConfig::named(Setting::Lq2d)).unwrap();
    let ctrl = MlpControl::new_random(2, &[32, 32], Activation::Silu, 1, 1.0).freeze();
    let grid = TimeGrid::uniform(1.0, 50);
    c.bench_function("simulate lq2d m=256 K=50", |b| {
        b.iter(|| simulate(&p, &ctrl, &grid, black_box(256), 7).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let (p, _) = make_setting(&SettingConfig::named(Setting::Lq2d)).unwrap();
    let ctrl = MlpControl::new_random(2, &[32, 32], Activation::Silu, 1, 1.0);
    let grid = TimeGrid::uniform(1.0, 50);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 128, 3).unwrap();
    let fam = ReparamFamily::learned(ReparamForm::Diagonal, 2, 1.0, false, &[16], 2);
    let opts = LossOptions::default();
    let mut group = c.benchmark_group("loss m=128 K=50");
    group.sample_size(20);
    for kind in LossKind::ALL {
        let input = LossInput {
            problem: &p,
            batch: &batch,
            ctrl: &ctrl,
            family: kind.needs_reparam().then_some(&fam),
            y0: None,
        };
        group.bench_with_input(BenchmarkId::from_parameter(kind), &input, |b, input| {
            b.iter(|| compute(kind, input, &opts).unwrap())
        });
    }
    group.finish();
}

fn reparam_table(c: &mut Criterion) {
    let fam = ReparamFamily::learned(ReparamForm::Full, 4, 1.0, false, &[32, 32], 5);
    let grid = TimeGrid::uniform(1.0, 100);
    c.bench_function("tabulate full M d=4 K=100", |b| b.iter(|| fam.tabulate(black_box(&grid))));
}

criterion_group!(benches, simulation, losses, reparam_table);
criterion_main!(benches);
