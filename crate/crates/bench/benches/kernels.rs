use std::hint::black_box;

use boxadapt_core::hf_adapter::extract_hfc;
use boxadapt_core::training::loss_and_grads;
use boxadapt_core::*;
use criterion::{criterion_group, criterion_main, Criterion};

fn forward_backward(c: &mut Criterion) {
    for (name, enc) in [("desk32", EncoderConfig::desk32()), ("toy", EncoderConfig::toy())] {
        let size = enc.input_size;
        let model = Model::new(&ModelConfig::for_encoder(enc), 0).unwrap();
        let sample = gen_synthetic(1, size, 0).unwrap().remove(0);
        let bbox = coarse_bbox(size, size, 0.95).unwrap();
        let cfg = TrainConfig::default();
        c.bench_function(&format!("forward/{name}"), |b| b.iter(|| model.predict(black_box(&sample.image), &bbox).unwrap()));
        c.bench_function(&format!("forward_backward/{name}"), |b| {
            b.iter(|| loss_and_grads(&model, black_box(&sample), &bbox, &cfg).unwrap())
        });
    }
}

fn high_pass(c: &mut Criterion) {
    for size in [64, 256, 1024] {
        let img = ImageTensor::from_fn(3, size, size, |ch, y, x| ((x * 7 + y * 13 + ch) % 17) as f64 / 17.0);
        c.bench_function(&format!("extract_hfc/{size}"), |b| b.iter(|| extract_hfc(black_box(&img), 0.25).unwrap()));
    }
}

fn hausdorff(c: &mut Criterion) {
    for size in [64, 256, 1024] {
        let r = size as f64 / 4.0;
        let disc = |cx: f64| Mask::from_fn(size, size, |x, y| (x as f64 - cx).hypot(y as f64 - size as f64 / 2.0) < r);
        let (a, b) = (disc(size as f64 * 0.45), disc(size as f64 * 0.55));
        c.bench_function(&format!("hd95/{size}"), |bch| bch.iter(|| hd95(black_box(&a), black_box(&b), None).unwrap()));
    }
}

criterion_group!(benches, forward_backward, high_pass, hausdorff);
criterion_main!(benches);
