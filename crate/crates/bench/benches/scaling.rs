//! Criterion benchmarks: the heat-conduction layer against the dense
//! attention yardstick across token counts, plus transform and model probes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use heatnet_bench::{attention_weights, decay, field, mini_model, tokens};
use heatnet_core::fusion::FusionMode;
use heatnet_core::net::StreamMask;
use heatnet_core::profiler::naive_attention;
use heatnet_core::spectral::{dct2, hco_forward};

fn bench_heat_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("heat_layer");
    for side in [16usize, 32, 64] {
        let x = field(8, side);
        let d = decay(8, side);
        group.bench_with_input(BenchmarkId::from_parameter(side * side), &side, |b, _| {
            b.iter(|| black_box(hco_forward(&x, &d).unwrap()));
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_attention");
    let [wq, wk, wv] = attention_weights();
    for side in [16usize, 32, 64] {
        let x = tokens(side);
        group.bench_with_input(BenchmarkId::from_parameter(side * side), &side, |b, _| {
            b.iter(|| black_box(naive_attention(&x, &wq, &wk, &wv).unwrap()));
        });
    }
    group.finish();
}

fn bench_dct2(c: &mut Criterion) {
    let mut group = c.benchmark_group("dct2");
    for side in [16usize, 32, 64] {
        let x = field(8, side);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| black_box(dct2(&x).unwrap()));
        });
    }
    group.finish();
}

fn bench_mini_inference(c: &mut Criterion) {
    let (net, store, rgb, evt) = mini_model();
    c.bench_function("mini_model_inference", |b| {
        b.iter(|| {
            black_box(
                net.infer(&store, &rgb, &evt, FusionMode::Route, None, StreamMask::default())
                    .unwrap(),
            )
        });
    });
}

criterion_group!(benches, bench_heat_layer, bench_attention, bench_dct2, bench_mini_inference);
criterion_main!(benches);
