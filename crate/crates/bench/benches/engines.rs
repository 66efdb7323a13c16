use std::collections::BTreeMap;
use std::hint::black_box;

use cloudlift::isa::{interpret, GridImage};
use cloudlift::layers::conv2d_same;
use cloudlift::lower::{lower_network, INPUT_NAME};
use cloudlift::model::{build_graph, forward, Block, ModelConfig, ParamSet};
use cloudlift::raster::{tiled_infer, Engine};
use cloudlift::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};

/// Deterministic input in [0, 1) without pulling in a random number generator.
fn input(bands: usize, side: usize) -> Tensor {
    Tensor::from_fn(bands, side, side, |c, y, x| {
        let h = (c * 7919 + y * 104_729 + x * 1_299_709) % 1000;
        h as f32 / 1000.0
    })
    .unwrap()
}

fn model(depth: usize) -> (ModelConfig, ParamSet) {
    let cfg = ModelConfig::with_depth(depth);
    let p = ParamSet::random(&cfg, 7).unwrap();
    (cfg, p)
}

fn bench_conv(c: &mut Criterion) {
    let (_, p) = model(1);
    let (w, _, _) = p.block(Block::Down(1)).unit(1);
    let x = input(w.in_channels(), 64);
    c.bench_function("conv3x3_64to64_64px", |b| b.iter(|| conv2d_same(black_box(&x), w).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let (cfg, p) = model(2);
    let g = build_graph(&cfg).unwrap();
    let x = input(cfg.in_bands, 64);
    c.bench_function("forward_depth2_64px", |b| b.iter(|| forward(black_box(&x), &g, &p).unwrap()));
}

fn bench_lowering(c: &mut Criterion) {
    let (cfg, p) = model(2);
    let g = build_graph(&cfg).unwrap();
    c.bench_function("lower_depth2", |b| b.iter(|| lower_network(black_box(&g), &p).unwrap()));
    let prog = lower_network(&g, &p).unwrap();
    let x = input(cfg.in_bands, 32);
    let inputs: BTreeMap<String, GridImage> =
        [(INPUT_NAME.to_string(), GridImage::from_tensor(&x, &[]).unwrap())].into();
    c.bench_function("interpret_depth2_32px", |b| b.iter(|| interpret(&prog, black_box(&inputs)).unwrap()));
}

fn bench_tiled(c: &mut Criterion) {
    let (cfg, p) = model(1);
    let x = input(cfg.in_bands, 96);
    c.bench_function("tiled_reference_depth1_96px_tile32", |b| {
        b.iter(|| tiled_infer(black_box(&x), &cfg, &p, Engine::Reference, 32).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_forward, bench_lowering, bench_tiled
}
criterion_main!(benches);
