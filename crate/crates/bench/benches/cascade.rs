//! Throughput of the cascade engine, benchmark generation and evaluation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rulecascade::dsl;
use rulecascade::eval::{evaluate, EvalConfig, PredictorKind};
use rulecascade::worldgen::Size;
use rulecascade_bench::{episodes, world, world_set};

fn engine(c: &mut Criterion) {
    let w = world(Size::Midmarket, 1);
    let eps = episodes(&w, 30, 2);
    let mut g = c.benchmark_group("engine");
    g.bench_function("apply_action", |b| {
        b.iter_batched(
            || eps.iter().map(|ep| ep.engine(&w).unwrap()).collect::<Vec<_>>(),
            |mut engines| {
                for (e, ep) in engines.iter_mut().zip(&eps) {
                    e.apply_action(&ep.action).unwrap();
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.bench_function("parse_rules", |b| {
        b.iter(|| {
            for r in &w.rules {
                dsl::parse(&r.source, &w.registry, &r.table).unwrap();
            }
        })
    });
    g.finish();
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generation");
    g.sample_size(20);
    g.bench_function("world_midmarket", |b| b.iter(|| world(Size::Midmarket, 3)));
    let w = world(Size::Small, 4);
    g.bench_function("bench_20_episodes", |b| b.iter(|| episodes(&w, 20, 5)));
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let w = world(Size::Small, 6);
    let eps = episodes(&w, 20, 7);
    let worlds = world_set(&w);
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for predictor in PredictorKind::ALL {
        let cfg = EvalConfig { predictor, k: 3, resamples: 200, ..EvalConfig::default() };
        g.bench_function(predictor.as_str(), |b| b.iter(|| evaluate(&worlds, &eps, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, engine, generation, evaluation);
criterion_main!(benches);
