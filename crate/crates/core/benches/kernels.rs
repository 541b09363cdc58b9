//! Hot kernels on a one-thread pool versus the default pool. Build with
//! `--no-default-features` for the purely sequential fallback.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use disentangle::independence::{hsic_backward, hsic_biased, permutation_null, KernelConfig};
use disentangle::noise::Distribution;
use disentangle::synthgen::make_benchmark;
use disentangle::trainer::{TrainConfig, Trainer};
use disentangle::NoiseSource;
use rayon::ThreadPoolBuilder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = ThreadPoolBuilder::new().build().expect("default pool");
    let label = format!("{}-threads", default.current_num_threads());
    vec![
        ("1-thread".into(), ThreadPoolBuilder::new().num_threads(1).build().expect("single pool")),
        (label, default),
    ]
}

fn kernels(c: &mut Criterion) {
    let mut noise = NoiseSource::new(0);
    let a = noise.sample(Distribution::StandardNormal, 256, 64);
    let b = noise.sample(Distribution::StandardNormal, 256, 64);
    let w = noise.sample(Distribution::StandardNormal, 64, 64);
    let small = noise.sample(Distribution::StandardNormal, 128, 8);
    let cfg = KernelConfig::default();
    let bench = make_benchmark(0).expect("benchmark");
    let batch = bench.train.select(&(0..256).collect::<Vec<_>>()).expect("rows");
    let labels = batch.labels_f64();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("matmul_256x64x64", &name), &pool, |bch, pool| {
            pool.install(|| bch.iter(|| black_box(a.matmul(&w).unwrap())))
        });
        group.bench_with_input(BenchmarkId::new("hsic_fwd_bwd_256x64", &name), &pool, |bch, pool| {
            pool.install(|| {
                bch.iter(|| {
                    let (_, tape) = hsic_biased(&a, &b, &cfg).unwrap();
                    black_box(hsic_backward(&tape, 1.0).unwrap())
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("permutation_null_200x128", &name), &pool, |bch, pool| {
            pool.install(|| {
                bch.iter(|| {
                    let mut n = NoiseSource::new(1);
                    black_box(permutation_null(&small, &small, &cfg, 200, &mut n).unwrap())
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("train_step_256x64", &name), &pool, |bch, pool| {
            pool.install(|| {
                let mut t = Trainer::new(64, TrainConfig::default()).unwrap();
                bch.iter(|| black_box(t.step(&batch.embeddings, &labels).unwrap()))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
