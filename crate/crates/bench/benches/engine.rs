use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pfa_core::data::{batch, synth_dataset};
use pfa_core::loss::{total_loss, LossConfig};
use pfa_core::model::{build_model, pfa_forward, ModelConfig};
use pfa_core::{ConvOptions, Graph, Tensor};

/// Deterministic values in [-0.5, 0.5) without pulling in an RNG.
fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = filled(&[8, 32, 32, 32]);
    let w = filled(&[32, 32, 3, 3]);
    let b = filled(&[32]);
    let mut group = c.benchmark_group("conv2d_8x32x32x32");
    for (label, opts) in [
        ("same", ConvOptions::same()),
        ("dilation5", ConvOptions::dilated(5)),
    ] {
        group.bench_function(format!("forward_{label}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.param("w", w.clone());
                let bv = g.param("b", b.clone());
                black_box(g.conv2d(xv, wv, Some(bv), opts).unwrap());
            })
        });
        group.bench_function(format!("forward_backward_{label}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let wv = g.param("w", w.clone());
                let bv = g.param("b", b.clone());
                let y = g.conv2d(xv, wv, Some(bv), opts).unwrap();
                let loss = g.sum(y);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = ModelConfig::default();
    let params = build_model(&model, 0).unwrap();
    let samples = synth_dataset(0, 8, model.backbone.input_size).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (images, masks) = batch(&refs).unwrap();
    let loss_cfg = LossConfig::default().with_alpha(0.7);
    let mut group = c.benchmark_group("desk_model_batch8_64x64");
    group.sample_size(10);
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let pv = params.bind(&mut g);
            let x = g.constant(images.clone());
            let out = pfa_forward(&mut g, &model, &pv, x).unwrap();
            let terms = total_loss(&mut g, out.saliency, &masks, &loss_cfg).unwrap();
            black_box(g.backward(terms.total).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
