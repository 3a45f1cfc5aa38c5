//! Compares the data-parallel core on a one-thread pool against the default
//! pool. Build with `--no-default-features` to measure the sequential path.

use alc_core::eval::{repeated_benchmark, BenchmarkConfig};
use alc_core::linkage::{classifiable_newborns, match_newborns};
use alc_core::net::{backward, init_params, Batch, Dims, LossKind};
use alc_core::synth::{build_datasets, generate_cohort, SynthConfig};
use alc_core::train::{Method, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(4, |n| n.get());
    [1, n]
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            (format!("{t}-threads"), pool)
        })
        .collect()
}

fn bench_all(c: &mut Criterion) {
    let cfg = SynthConfig {
        n_mothers: 2000,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let eligible = classifiable_newborns(&cohort.newborns, &cohort.vocab).unwrap();
    let links = match_newborns(&cohort.mothers, &eligible, 3, 1440);
    let data = build_datasets(&cohort.mothers, &cohort.newborns, &links, &cohort.vocab, &cfg).unwrap();
    let params = init_params(Dims::new(cohort.vocab.size(), 64, 64).unwrap(), 1);
    let batch = Batch::from_examples(data.d_star.iter().take(64).map(|e| (e, e.clean_label.unwrap())));
    let bench_cfg = BenchmarkConfig {
        repeats: 2,
        methods: vec![Method::Alc, Method::NoLcClean],
        train: TrainConfig {
            n_epochs: 2,
            ..TrainConfig::default()
        },
        ..BenchmarkConfig::default()
    };

    let mut group = c.benchmark_group("core");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("batch_gradient", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| backward(&batch, &params, &LossKind::Plain).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("linkage", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| match_newborns(&cohort.mothers, &eligible, 3, 1440)))
        });
        group.bench_with_input(BenchmarkId::new("cohort", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| generate_cohort(&cfg).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("benchmark_repeats", &name), &pool, |b, pool| {
            b.iter(|| pool.install(|| repeated_benchmark(&data, cohort.vocab.size(), &bench_cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
