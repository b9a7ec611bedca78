//! Primitive-level tape costs: forward build vs full reverse sweep.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use udg_core::grad::{ops, Rng, Stream, Tape, TapeMode};

fn matmul_chain(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_chain");
    for &(n, d) in &[(32usize, 16usize), (64, 32)] {
        let mut rng = Rng::new(1).derive(Stream::Data, &[n as u64, d as u64]);
        let x = rng.normal_vec(n * d);
        let w1 = rng.normal_vec(d * d);
        let w2 = rng.normal_vec(d * d);
        g.bench_function(format!("forward_{n}x{d}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new(TapeMode::FirstOrder);
                let xt = tape.constant(&[n, d], x.clone()).unwrap();
                let w1t = tape.leaf(&[d, d], w1.clone()).unwrap();
                let w2t = tape.leaf(&[d, d], w2.clone()).unwrap();
                let h = ops::matmul(&mut tape, &xt, &w1t).unwrap();
                let h = ops::relu(&mut tape, &h).unwrap();
                let z = ops::matmul(&mut tape, &h, &w2t).unwrap();
                ops::mean(&mut tape, &z).unwrap().item()
            })
        });
        g.bench_function(format!("backward_{n}x{d}"), |b| {
            b.iter_batched(
                || {
                    let mut tape = Tape::new(TapeMode::FirstOrder);
                    let xt = tape.constant(&[n, d], x.clone()).unwrap();
                    let w1t = tape.leaf(&[d, d], w1.clone()).unwrap();
                    let w2t = tape.leaf(&[d, d], w2.clone()).unwrap();
                    let h = ops::matmul(&mut tape, &xt, &w1t).unwrap();
                    let h = ops::relu(&mut tape, &h).unwrap();
                    let z = ops::matmul(&mut tape, &h, &w2t).unwrap();
                    let loss = ops::mean(&mut tape, &z).unwrap();
                    (tape, loss, w1t, w2t)
                },
                |(mut tape, loss, w1t, w2t)| tape.backward(&loss, &[&w1t, &w2t], false).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn cross_entropy(c: &mut Criterion) {
    let n = 64;
    let k = 10;
    let mut rng = Rng::new(2).derive(Stream::Data, &[]);
    let z = rng.normal_vec(n * k);
    let mut y = vec![0.0; n * k];
    for (i, row) in y.chunks_mut(k).enumerate() {
        row[i % k] = 1.0;
    }
    c.bench_function("softmax_cross_entropy_64x10", |b| {
        b.iter(|| {
            let mut tape = Tape::new(TapeMode::FirstOrder);
            let zt = tape.leaf(&[n, k], z.clone()).unwrap();
            let yt = tape.constant(&[n, k], y.clone()).unwrap();
            let loss = ops::softmax_cross_entropy(&mut tape, &zt, &yt).unwrap();
            let g = tape.backward(&loss, &[&zt], false).unwrap();
            g[0].data()[0]
        })
    });
}

criterion_group!(benches, matmul_chain, cross_entropy);
criterion_main!(benches);
