use criterion::{criterion_group, criterion_main, Criterion};
use stealthpath::sde::SeedSpec;
use stealthpath::stealth::{log_tau_grid, regularized_gamma, simulate_np_rates, tradeoff_curve, DetectorSpec};

fn closed_forms(c: &mut Criterion) {
    let spec = DetectorSpec::new(300, 1.1).unwrap();
    let taus = log_tau_grid(1e-3, 1e3, 50);
    c.bench_function("tradeoff_curve_50", |b| b.iter(|| tradeoff_curve(&spec, &taus).unwrap()));
    c.bench_function("regularized_gamma_a150", |b| b.iter(|| regularized_gamma(std::hint::black_box(160.0), 150.0).unwrap()));
}

fn monte_carlo(c: &mut Criterion) {
    let spec = DetectorSpec::new(100, 1.1).unwrap();
    let mut g = c.benchmark_group("simulate_np_rates");
    g.sample_size(10);
    g.bench_function("k100_10k_trials", |b| b.iter(|| simulate_np_rates(&spec, &[0.25, 1.0, 4.0], 10_000, &SeedSpec::new(3)).unwrap()));
    g.finish();
}

criterion_group!(benches, closed_forms, monte_carlo);
criterion_main!(benches);
