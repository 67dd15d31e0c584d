use criterion::{criterion_group, criterion_main, Criterion};
use fourierformer_core::kernels::{fourier_log_weight, fourier_log_weight_grad, phi_normalization, sinc, Bandwidth, PhiKernel};
use fourierformer_core::numerics::Rng;
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1024).map(|i| (i as f64 - 512.0) * 0.01).collect();
    c.bench_function("sinc_1024", |b| b.iter(|| xs.iter().map(|&x| sinc(black_box(x))).sum::<f64>()));

    let mut rng = Rng::new(3);
    let q = rng.normal_tensor(&[16], 0.5).into_data();
    let k = rng.normal_tensor(&[16], 0.5).into_data();
    let r = Bandwidth::Scalar(2.0);
    let kernel = PhiKernel::new(4).unwrap();
    c.bench_function("log_weight_d16", |b| b.iter(|| fourier_log_weight(black_box(&q), &k, &r, &kernel).unwrap()));
    c.bench_function("log_weight_grad_d16", |b| {
        b.iter(|| fourier_log_weight_grad(black_box(&q), &k, &r, &kernel).unwrap())
    });
    // Cached after the first call; measures the lookup.
    c.bench_function("phi_normalization_l4", |b| b.iter(|| phi_normalization(black_box(4)).unwrap()));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
