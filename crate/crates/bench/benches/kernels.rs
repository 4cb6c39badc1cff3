use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use faar_bench::{gaussian_layer, gaussian_vector};
use faar_core::micronet::{backprop_stage2, MicroNet, Stage2Config, DEFAULT_DIMS};
use faar_core::oracle::brute_force_optimal;
use faar_core::pipeline::{gaussian_matrix, rtn_vars};
use faar_core::{
    compute_scales, dequantize, e4m3_round, optimize_layer, quantize_rtn, Stage1Config,
};

fn codec(c: &mut Criterion) {
    let w = gaussian_vector(1 << 16, 1);
    let scales = compute_scales(&w, 16).unwrap();
    c.bench_function("quantize_rtn_64k", |b| {
        b.iter(|| quantize_rtn(black_box(&w), black_box(&scales)).unwrap())
    });
    let q = quantize_rtn(&w, &scales).unwrap();
    c.bench_function("dequantize_64k", |b| b.iter(|| dequantize(black_box(&q))));
    c.bench_function("e4m3_round", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            let mut x = 1e-3;
            while x < 400.0 {
                acc += e4m3_round(black_box(x)).unwrap();
                x *= 1.01;
            }
            acc
        })
    });
}

fn stage1(c: &mut Criterion) {
    let mut group = c.benchmark_group("stage1_optimize_layer");
    group.sample_size(10);
    for dim in [32usize, 64] {
        let (layer, batch) = gaussian_layer(dim, dim, 128, 7);
        let cfg = Stage1Config {
            steps: 100,
            ..Stage1Config::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| optimize_layer(&layer, std::slice::from_ref(&batch), &cfg).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("brute_force");
    group.sample_size(10);
    for n in [8usize, 12, 16] {
        let (layer, batch) = gaussian_layer(2, n / 2, 16, 3);
        let scales = compute_scales(layer.weights(), 16).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                brute_force_optimal(&layer, std::slice::from_ref(&batch), &scales, 20).unwrap()
            })
        });
    }
    group.finish();
}

fn stage2(c: &mut Criterion) {
    let net = MicroNet::random(&DEFAULT_DIMS, 1).unwrap();
    let x = gaussian_matrix(128, DEFAULT_DIMS[0], 2);
    let vars = rtn_vars(&net, 16).unwrap();
    let cfg = Stage2Config::default();
    c.bench_function("backprop_stage2_default_net", |b| {
        b.iter(|| backprop_stage2(&net, &x, &vars, 20.0, &cfg).unwrap())
    });
}

criterion_group!(benches, codec, stage1, oracle, stage2);
criterion_main!(benches);
