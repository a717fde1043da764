use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use swifter_core::backbone::fourier::ft_layer;
use swifter_core::bench::synthetic_features;
use swifter_core::fft::fft_1d;
use swifter_core::tensor::{matmul, matmul_seq};
use swifter_core::ComplexTensor;

fn matmuls(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = synthetic_features(n, n, 1);
        let b = synthetic_features(n, n, 2);
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, _| {
            bch.iter(|| matmul_seq(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn fourier(c: &mut Criterion) {
    let mut g = c.benchmark_group("fourier");
    for t in [49, 64, 256] {
        let x = synthetic_features(t, 96, 3);
        g.bench_with_input(BenchmarkId::new("ft_layer", t), &t, |bch, _| {
            bch.iter(|| ft_layer(black_box(&x)).unwrap())
        });
        let v = ComplexTensor::new(&[t], x.data()[..t].to_vec(), vec![0.0; t]).unwrap();
        g.bench_with_input(BenchmarkId::new("fft_1d", t), &t, |bch, _| {
            bch.iter(|| fft_1d(black_box(&v)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmuls, fourier);
criterion_main!(benches);
