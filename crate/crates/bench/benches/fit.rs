use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use rankmix_bench::{reference_data, reference_params};
use rankmix_core::mstep::{solve_theta, ThetaObjective};
use rankmix_core::special::{digamma, ln_gamma, trigamma};
use rankmix_core::{run_estep, EStepConfig, MStepConfig, VariationalParams};

fn special_functions(c: &mut Criterion) {
    let xs: Vec<f64> = (1..=200).map(|i| i as f64 * 0.37).collect();
    c.bench_function("ln_gamma+digamma+trigamma x200", |b| {
        b.iter(|| xs.iter().map(|&x| ln_gamma(x) + digamma(x) + trigamma(x)).sum::<f64>())
    });
}

fn estep(c: &mut Criterion) {
    let data = reference_data(1000, 1);
    let params = reference_params();
    let cfg = EStepConfig { max_iters: 1, ..Default::default() };
    c.bench_function("E-step sweep T=1000", |b| {
        b.iter(|| run_estep(&data, &params, VariationalParams::uniform(&data, 2), black_box(&cfg)).unwrap())
    });
}

fn theta_solve(c: &mut Criterion) {
    let data = reference_data(1000, 2);
    let params = reference_params();
    let var = run_estep(&data, &params, VariationalParams::uniform(&data, 2), &EStepConfig::default()).unwrap().var;
    let objective = ThetaObjective::new(&data, &var, 0, 0);
    let start = vec![1.0 / 7.0; 7];
    let cfg = MStepConfig::default();
    c.bench_function("theta barrier solve V=7", |b| b.iter(|| solve_theta(&objective, black_box(&start), &cfg)));
}

criterion_group!(benches, special_functions, estep, theta_solve);
criterion_main!(benches);
