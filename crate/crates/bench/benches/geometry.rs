use criterion::{criterion_group, criterion_main, Criterion};
use ltg_core::geometry::{giou_with_grad, iou, iou_hat_with_grad, union_box};
use ltg_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn boxes(n: usize) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            BBox::new(x, y, x + rng.gen_range(0.01..0.2), y + rng.gen_range(0.01..0.2))
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let bs = boxes(1024);
    let region = BBox::new(0.2, 0.2, 0.6, 0.5);
    c.bench_function("iou 1024 pairs", |b| {
        b.iter(|| bs.windows(2).map(|w| iou(&w[0], &w[1])).sum::<f64>())
    });
    c.bench_function("overlap with grad 1024 tokens", |b| {
        b.iter(|| bs.iter().map(|t| iou_hat_with_grad(black_box(&region), t).1[0]).sum::<f64>())
    });
    c.bench_function("giou with grad 1024 pairs", |b| {
        b.iter(|| bs.windows(2).map(|w| giou_with_grad(&w[0], &w[1]).0).sum::<f64>())
    });
    c.bench_function("union fold 1024", |b| {
        b.iter(|| bs.iter().fold(bs[0], |u, t| union_box(&u, t)))
    });
}

criterion_group!(benches, geometry);
criterion_main!(benches);
