use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use offset_fl::exec::{Executor, Parallelism};
use offset_fl::harness::{run_experiment_with, ExperimentConfig};
use offset_fl::toy::{self, ToyClientSpec};

fn executors() -> Vec<(&'static str, Executor)> {
    let mut v = vec![("sequential", Executor::sequential())];
    if cfg!(feature = "parallel") {
        v.push((
            "pool",
            Executor::new(Parallelism::Threads(0)).expect("worker pool"),
        ));
    }
    v
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    for clients in [4usize, 8, 16] {
        let cfg = ExperimentConfig {
            num_classes: clients,
            num_clients: clients,
            rounds: 3,
            ..ExperimentConfig::default()
        };
        for (name, exec) in executors() {
            group.bench_with_input(BenchmarkId::new(name, clients), &cfg, |b, cfg| {
                b.iter(|| run_experiment_with(cfg, &exec).unwrap())
            });
        }
    }
    group.finish();
}

fn q_search(c: &mut Criterion) {
    let c1 = ToyClientSpec::new(vec![2.0], 0.1, 100, 1);
    let c2 = ToyClientSpec::new(vec![3.0], 0.1, 100, 2);
    let q_grid = toy::default_q_grid();
    let w_grid = toy::default_w_grid();
    let mut group = c.benchmark_group("q_search");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(name, |b| {
            b.iter(|| {
                toy::brute_force_q_with(&exec, &c1, &c2, toy::DEFAULT_P, &q_grid, &w_grid).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, training, q_search);
criterion_main!(benches);
