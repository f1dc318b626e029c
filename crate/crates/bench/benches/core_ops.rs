use std::collections::HashMap;

use criterion::{criterion_group, criterion_main, Criterion};

use crbd_core::codec::{self, CompressionSpec};
use crbd_core::image::ImageTensor;
use crbd_core::model::LayerSelector;
use crbd_core::train::fc_loss_batch;
use crbd_core::trigger::{self, make_gaussian_trigger};

fn sample_image() -> ImageTensor {
    let mut img = ImageTensor::zeros(3, 32, 32);
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                img.set(c, y, x, ((x * 7 + y * 11 + c * 31) % 255) as f32 / 255.0);
            }
        }
    }
    img
}

fn bench_stamp(c: &mut Criterion) {
    let img = sample_image();
    let trig = make_gaussian_trigger((32, 32), 0.15, 0.3, 0).unwrap();
    c.bench_function("stamp 32x32", |b| {
        b.iter(|| trigger::stamp(std::hint::black_box(&img), &trig).unwrap())
    });
}

fn bench_compress(c: &mut Criterion) {
    let img = sample_image();
    let mut group = c.benchmark_group("compress 32x32");
    for spec in CompressionSpec::defaults() {
        group.bench_function(spec.tag(), |b| {
            b.iter(|| codec::compress(std::hint::black_box(&img), spec).unwrap())
        });
    }
    group.finish();
}

fn bench_fc_loss(c: &mut Criterion) {
    let dev = candle_core::Device::Cpu;
    let a = candle_core::Tensor::rand(0f32, 1f32, (64, 512), &dev).unwrap();
    let b = candle_core::Tensor::rand(0f32, 1f32, (64, 512), &dev).unwrap();
    let mut fa = HashMap::new();
    fa.insert("flatten".to_string(), a);
    let mut fb = HashMap::new();
    fb.insert("flatten".to_string(), b);
    let sel = LayerSelector::new(vec![("flatten".into(), 1.0)]);
    c.bench_function("fc_loss 64x512", |bch| {
        bch.iter(|| fc_loss_batch(std::hint::black_box(&fa), &fb, &sel).unwrap())
    });
}

criterion_group!(benches, bench_stamp, bench_compress, bench_fc_loss);
criterion_main!(benches);
