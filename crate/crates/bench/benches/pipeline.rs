use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use ltv_watermark::detector::{detect, DetectorConfig};
use ltv_watermark::normalization::{gn_bands, matrix_normalizer, sigma_delta, NormalizationTables};
use ltv_watermark::scenarios::example1_system;
use ltv_watermark::simulate::run_realization;

const HORIZON: usize = 2_000;
const WINDOW: usize = 20;
const KAPPA: usize = 2;

fn bench_simulation(c: &mut Criterion) {
    let sys = example1_system(HORIZON).unwrap();
    let mut group = c.benchmark_group("simulate");
    group.throughput(Throughput::Elements(HORIZON as u64));
    group.sample_size(30);
    group.bench_function("closed_loop_steps", |b| {
        b.iter(|| run_realization(&sys, None, 7, HORIZON).unwrap());
    });
    group.finish();
}

fn bench_tables(c: &mut Criterion) {
    let sys = example1_system(HORIZON).unwrap();
    let sd = sigma_delta(&sys, HORIZON - 1).unwrap();
    let mut group = c.benchmark_group("tables");
    group.throughput(Throughput::Elements(HORIZON as u64));
    group.sample_size(30);
    group.bench_function("covariance_and_normalizers", |b| {
        b.iter(|| {
            let sd = sigma_delta(&sys, HORIZON - 1).unwrap();
            for n in 0..HORIZON {
                matrix_normalizer(&sys, &sd[n], n).unwrap();
            }
        });
    });
    group.bench_function("correlation_bands", |b| {
        let v: Vec<_> =
            (0..HORIZON).map(|n| matrix_normalizer(&sys, &sd[n], n).unwrap()).collect();
        b.iter(|| gn_bands(&sys, &v, &sd, HORIZON - 1, WINDOW - 1).unwrap());
    });
    group.finish();
}

fn bench_detection(c: &mut Criterion) {
    let sys = example1_system(HORIZON).unwrap();
    let tables = NormalizationTables::analytic(&sys, HORIZON - 1, WINDOW, KAPPA).unwrap();
    let real = run_realization(&sys, None, 7, HORIZON).unwrap();
    let mut group = c.benchmark_group("detect");
    group.throughput(Throughput::Elements(HORIZON as u64));
    group.sample_size(30);
    for use_g in [true, false] {
        let config = DetectorConfig {
            window: WINDOW,
            kappa: KAPPA,
            threshold: f64::INFINITY,
            use_g,
            false_alarm_rate: 0.002,
        };
        let name = if use_g { "windows_with_correlation" } else { "windows_identity" };
        group.bench_function(name, |b| {
            b.iter(|| detect(&real, &tables, &config).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulation, bench_tables, bench_detection);
criterion_main!(benches);
