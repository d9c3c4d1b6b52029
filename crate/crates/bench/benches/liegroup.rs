use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stgp_core::liegroup::{adjoint, left_jacobian, left_jacobian_inv, se3_exp, se3_log};
use stgp_core::Twist;

fn bench(c: &mut Criterion) {
    let xi = Twist::new(0.3, -0.2, 0.5, 0.7, -1.1, 0.4);
    let t = se3_exp(&xi).unwrap();
    c.bench_function("se3_exp", |b| b.iter(|| se3_exp(black_box(&xi))));
    c.bench_function("se3_log", |b| b.iter(|| se3_log(black_box(&t))));
    c.bench_function("adjoint", |b| b.iter(|| adjoint(black_box(&t))));
    c.bench_function("left_jacobian", |b| b.iter(|| left_jacobian(black_box(&xi))));
    c.bench_function("left_jacobian_inv", |b| b.iter(|| left_jacobian_inv(black_box(&xi))));
}

criterion_group!(benches, bench);
criterion_main!(benches);
