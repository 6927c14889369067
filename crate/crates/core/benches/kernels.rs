//! Parallel vs sequential kernels, plus the gather / quantize+dequantize pair.

use std::hint::black_box;

use chanquant::exec;
use chanquant::pipeline::bench_plan;
use chanquant::quant::{dequantize, quantize_per_token_dynamic, quantize_weights, quantized_linear, WeightScheme};
use chanquant::dimrec::reconstruct_activation;
use chanquant::tensor::matmul;
use chanquant::toymodel::{BlockConfig, OutlierProfile, ToyBlock};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn kernels(c: &mut Criterion) {
    let profile = OutlierProfile::new(0);
    let tokens = 1024;

    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let x = profile.generate_stream(tokens, n, 1).unwrap();
        let w = profile.generate_stream(n, n, 2).unwrap();
        for (name, par) in MODES {
            exec::set_parallel(par);
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| b.iter(|| matmul(black_box(&x), &w)));
        }
    }
    g.finish();

    let mut g = c.benchmark_group("int_linear_w4a4");
    for n in [64, 256] {
        let x = profile.generate_stream(tokens, n, 1).unwrap();
        let w = quantize_weights(&profile.generate_stream(n, n, 2).unwrap(), &WeightScheme::per_channel(4)).unwrap();
        let xq = quantize_per_token_dynamic(&x, 4, 1.0).unwrap();
        for (name, par) in MODES {
            exec::set_parallel(par);
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| quantized_linear(black_box(&xq), &w))
            });
        }
    }
    g.finish();

    let mut g = c.benchmark_group("gather_vs_quant_dequant");
    for n in [64, 256] {
        let x = profile.generate_stream(tokens, n, 1).unwrap();
        let plan = bench_plan(&profile, n, 4, 2.0).unwrap();
        for (name, par) in MODES {
            exec::set_parallel(par);
            g.bench_with_input(BenchmarkId::new(format!("gather/{name}"), n), &n, |b, _| {
                b.iter(|| reconstruct_activation(black_box(&x), &plan))
            });
            g.bench_with_input(BenchmarkId::new(format!("quant_dequant/{name}"), n), &n, |b, _| {
                b.iter(|| dequantize(&quantize_per_token_dynamic(black_box(&x), 4, 1.0).unwrap()))
            });
        }
    }
    g.finish();

    let mut g = c.benchmark_group("block_forward");
    let block = ToyBlock::random(BlockConfig::default(), 0).unwrap();
    let x = profile.generate_stream(4 * 64, 64, 1).unwrap().reshape(vec![4, 64, 64]).unwrap();
    for (name, par) in MODES {
        exec::set_parallel(par);
        g.bench_function(name, |b| b.iter(|| block.forward(black_box(&x))));
    }
    g.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, kernels);
criterion_main!(benches);
