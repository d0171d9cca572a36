use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pneumoscan_bench::pattern;
use pneumoscan_core::Tape;

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, side) in &[(8usize, 64usize), (32, 32), (64, 16)] {
        let x = pattern(&[4, ch, side, side], 1);
        let w = pattern(&[ch, ch, 3, 3], 2);
        group.bench_with_input(BenchmarkId::new("forward", format!("{ch}x{side}")), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                t.conv2d(xv, wv, None, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}x{side}")), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone().with_requires_grad(true));
                let wv = t.param(&w, true);
                let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn pooling(c: &mut Criterion) {
    let x = pattern(&[8, 16, 64, 64], 3);
    c.bench_function("max_pool2d_2x2_8x16x64x64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            t.max_pool2d(xv, 2, 2).unwrap()
        })
    });
}

criterion_group!(benches, conv2d, pooling);
criterion_main!(benches);
