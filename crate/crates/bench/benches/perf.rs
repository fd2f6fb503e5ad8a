use criterion::{criterion_group, criterion_main, Criterion};
use minsurro_bench::camel::{camel_model_spec, CamelConfig};
use minsurro_bench::ocp::{ocp_objective_grad, OcpParameter, OcpSpec};
use minsurro_bench::path::Path;
use minsurro_bench::FrenetState;
use minsurro_core::solve::{decompose_solve, SolveOptions};
use std::hint::black_box;

fn bench_surrogate_eval(c: &mut Criterion) {
    let cfg = CamelConfig {
        k: 5,
        ..CamelConfig::default()
    };
    let model = camel_model_spec(&cfg).build(7).unwrap();
    c.bench_function("surrogate_exact_k5", |b| {
        b.iter(|| model.exact(black_box(&[0.3, -0.4]), &[]).unwrap())
    });
    c.bench_function("surrogate_grad_x_k5", |b| {
        b.iter(|| model.grad_x_smoothed(black_box(&[0.3, -0.4]), &[]).unwrap())
    });
}

fn bench_decompose(c: &mut Criterion) {
    let cfg = CamelConfig {
        k: 5,
        ..CamelConfig::default()
    };
    let model = camel_model_spec(&cfg).build(7).unwrap();
    let region = minsurro_bench::camel::camel_domain();
    let opts = SolveOptions {
        parallel: false,
        ..SolveOptions::default()
    };
    c.bench_function("decompose_solve_k5", |b| {
        b.iter(|| decompose_solve(&model, &[], &region, &opts).unwrap())
    });
}

fn bench_ocp_gradient(c: &mut Criterion) {
    let path = Path::lissajous();
    let spec = OcpSpec::for_path(&path);
    let state = FrenetState::new(0.2, 0.05, 0.1);
    let p = OcpParameter::from_state(state, &path, &spec).unwrap();
    let u = vec![0.7, 0.1, 0.7, 0.1, 0.7, 0.1, 0.7, 0.1, 0.7, 0.1];
    c.bench_function("ocp_objective_grad", |b| {
        b.iter(|| ocp_objective_grad(black_box(&u), &p, &path, &spec).unwrap())
    });
}

criterion_group!(
    benches,
    bench_surrogate_eval,
    bench_decompose,
    bench_ocp_gradient
);
criterion_main!(benches);
