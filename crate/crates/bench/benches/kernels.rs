use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rtcnet::ops::{
    conv2d_backward, conv2d_forward, maxpool2x2, softmax_cross_entropy, transposed_conv2d_backward,
    transposed_conv2d_forward,
};
use rtcnet::Shape;
use rtcnet_bench::{conv_spec, random, random_mask, upsample_spec};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(16usize, 64usize), (64, 56), (128, 28)] {
        let x = random(Shape::new(1, ch, size, size), 1);
        let spec = conv_spec(ch, ch, 3, 2);
        let y = conv2d_forward(&x, &spec).unwrap();
        let id = format!("{ch}ch_{size}px");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| b.iter(|| conv2d_forward(black_box(x), &spec)));
        g.bench_with_input(BenchmarkId::new("backward", &id), &x, |b, x| {
            b.iter(|| conv2d_backward(black_box(x), &spec, &y))
        });
    }
    g.finish();
}

fn transposed(c: &mut Criterion) {
    let mut g = c.benchmark_group("transposed_conv2d_4x4_s2");
    for &(cin, cout, size) in &[(64usize, 32usize, 28usize), (128, 64, 56)] {
        let x = random(Shape::new(1, cin, size, size), 3);
        let spec = upsample_spec(cin, cout, 4);
        let y = transposed_conv2d_forward(&x, &spec).unwrap();
        let id = format!("{cin}to{cout}_{size}px");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
            b.iter(|| transposed_conv2d_forward(black_box(x), &spec))
        });
        g.bench_with_input(BenchmarkId::new("backward", &id), &x, |b, x| {
            b.iter(|| transposed_conv2d_backward(black_box(x), &spec, &y))
        });
    }
    g.finish();
}

fn pool_and_loss(c: &mut Criterion) {
    let x = random(Shape::new(1, 64, 224, 256), 5);
    c.bench_function("maxpool2x2_64ch_224x256", |b| b.iter(|| maxpool2x2(black_box(&x))));
    let logits = random(Shape::new(4, 2, 128, 128), 6);
    let target = random_mask(4, 128, 128, 7);
    c.bench_function("softmax_cross_entropy_4x128x128", |b| {
        b.iter(|| softmax_cross_entropy(black_box(&logits), &target, (1.0, 1.0)))
    });
}

criterion_group!(benches, conv, transposed, pool_and_loss);
criterion_main!(benches);
