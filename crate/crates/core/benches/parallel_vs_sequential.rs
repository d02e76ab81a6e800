//! Hot loops on a single worker versus the full pool. Build with
//! `--no-default-features` to time the purely sequential fallback instead.

use std::hint::black_box;

use clue::cvae::{CvaeConfig, CvaeModel};
use clue::envs::{generate_mixture, BehaviorPolicy, PointMaze};
use clue::offline_rl::{Batch, IqlAgent, IqlConfig};
use clue::parallel::with_threads;
use clue::pipeline::{fit_labeler, RewardConfig};
use clue::rng::{derive, normal, seeded, Stream};
use clue::skills::{kmeans, transition_features, KMeansConfig};
use clue::Dataset;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn data() -> Dataset {
    let env = PointMaze::builtin("medium").unwrap();
    let mix = [
        (BehaviorPolicy::NoisyExpert { eps: 0.1 }, 0.1),
        (BehaviorPolicy::Diverse { eps: 0.1 }, 0.9),
    ];
    generate_mixture(&env, &mix, 40, &mut derive(1, Stream::Data, 0)).unwrap()
}

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    vec![("sequential", 1), ("parallel", all)]
}

fn bench(c: &mut Criterion) {
    let d = data();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = d
        .transitions()
        .take(256)
        .map(|t| (t.state.clone(), t.action.clone()))
        .collect();
    let cvae_cfg = CvaeConfig::desk();
    let model = CvaeModel::new(2, 2, &cvae_cfg, d.state_stats(), &mut seeded(0)).unwrap();
    let mut rng = seeded(1);
    let eps: Vec<Vec<Vec<f64>>> = pairs
        .iter()
        .map(|_| vec![(0..cvae_cfg.latent_dim).map(|_| normal(&mut rng)).collect()])
        .collect();

    let table = d.table();
    let batch = Batch::sample(&table, 256, &mut seeded(2));
    let agent = IqlAgent::for_dataset(&d, IqlConfig::desk(), &mut seeded(3)).unwrap();

    let features = transition_features(&d);
    let labeler = fit_labeler(
        &d,
        &d,
        &CvaeConfig {
            iterations: 10,
            ..cvae_cfg.clone()
        },
        &RewardConfig::default(),
        1,
        0,
    )
    .unwrap()
    .0;

    let mut g = c.benchmark_group("hot_loops");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_function(BenchmarkId::new("cvae_objective", name), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    black_box(
                        model
                            .objective_and_grad(&pairs, &eps, &pairs[..32])
                            .unwrap(),
                    )
                })
            })
        });
        g.bench_function(BenchmarkId::new("iql_step", name), |b| {
            b.iter_batched(
                || (agent.clone(), seeded(4)),
                |(mut a, mut r)| {
                    with_threads(threads, || black_box(a.train_step(&batch, &mut r).unwrap()))
                },
                criterion::BatchSize::SmallInput,
            )
        });
        g.bench_function(BenchmarkId::new("kmeans", name), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    black_box(
                        kmeans(&features, 8, &KMeansConfig::default(), &mut seeded(5)).unwrap(),
                    )
                })
            })
        });
        g.bench_function(BenchmarkId::new("relabel", name), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    black_box(labeler.relabel(&d, &mut seeded(6)).unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
