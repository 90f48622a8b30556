use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use rnddpc::control::{build_rnddpc_qp, ControllerKind};
use rnddpc::harness::build_controller;
use rnddpc::qp::solve_qp;
use rnddpc::reach::{reach_step, TubeBuilder};
use rnddpc::setcalc::Zonotope;
use rnddpc_bench::Fixture;
use std::hint::black_box;

fn pipeline(c: &mut Criterion) {
    let fx = Fixture::new(3, 20);
    let cfg = fx.controller_config(ControllerKind::Rnddpc);
    let sets = &fx.art.sets;
    let enc = &fx.art.model.encoder;
    let ubar = DVector::zeros(cfg.horizon);
    let mut i = 0;
    let mut next = || {
        i = (i + 1) % fx.states.len();
        &fx.states[i]
    };

    let builder = TubeBuilder::new(sets);
    c.bench_function("tube_build", |b| {
        b.iter(|| {
            let (x, eps) = next();
            builder.build(sets, &enc.lift(x), *eps, &ubar, &cfg.reach).unwrap()
        })
    });

    c.bench_function("reach_step", |b| {
        b.iter(|| {
            let (x, eps) = next();
            reach_step(sets, &Zonotope::point(enc.lift(x)), 0.0, *eps, &cfg.reach).unwrap()
        })
    });

    let problems: Vec<_> = fx
        .states
        .iter()
        .map(|(x, eps)| build_rnddpc_qp(sets, enc, x, *eps, &fx.reference(*eps), &ubar, &cfg).unwrap().0)
        .collect();
    let settings = cfg.qp_settings();
    let mut j = 0;
    c.bench_function("qp_solve", |b| {
        b.iter(|| {
            j = (j + 1) % problems.len();
            black_box(solve_qp(&problems[j], &settings))
        })
    });

    for kind in [ControllerKind::Rnddpc, ControllerKind::Kmpc] {
        let mut ctrl = build_controller(&fx.cfg, kind, &fx.art).unwrap();
        let mut k = 0;
        c.bench_function(&format!("decide_{}", kind.name()), |b| {
            b.iter(|| {
                k = (k + 1) % fx.states.len();
                let (x, eps) = &fx.states[k];
                ctrl.decide(x, *eps).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = pipeline
}
criterion_main!(benches);
