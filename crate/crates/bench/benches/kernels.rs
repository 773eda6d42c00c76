use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use eraserelu_core::arch::{build_network, BuildOptions, Family, Network};
use eraserelu_core::nn::Mode;
use eraserelu_core::shatter::{probe, scalar_net, Grid, ScalarNetConfig};
use eraserelu_core::{CounterRng, Fill, Primitive, Tape, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = CounterRng::new(1);
    let x = Tensor::<f32>::create(&[32, 16, 32, 32], Fill::Uniform { low: -1.0, high: 1.0 }, &mut rng).unwrap();
    let w = Tensor::<f32>::create(&[16, 16, 3, 3], Fill::HeNormal { fan_in: 144 }, &mut rng).unwrap();
    c.bench_function("conv3x3_16ch_32x32_b32_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_requires_grad(true));
            let wv = tape.leaf(w.clone().with_requires_grad(true));
            let y = tape.forward(&Primitive::Conv2d { stride: 1, pad: 1 }, &[xv, wv]).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        })
    });
}

fn mlp_step(c: &mut Criterion) {
    let g = build_network(Family::Mlp12, BuildOptions::default()).unwrap();
    let mut net = Network::<f32>::new(g, &CounterRng::new(2)).unwrap();
    let mut rng = CounterRng::new(3);
    let x = Tensor::<f32>::create(&[128, 1, 28, 28], Fill::Uniform { low: 0.0, high: 1.0 }, &mut rng).unwrap();
    let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
    c.bench_function("mlp12_b128_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let pass = net.forward(&mut tape, xv, Mode::Train, &mut rng, true).unwrap();
            let loss = tape.softmax_cross_entropy(pass.output, &labels).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn shatter_probe(c: &mut Criterion) {
    let mut cfg = ScalarNetConfig::new(50, true, 2, 4);
    cfg.grid = Grid { lo: -2.0, hi: 2.0, points: 250 };
    c.bench_function("scalar_net_d50_w200_250pts_probe", |b| {
        b.iter_batched(
            || scalar_net::<f32>(&cfg, 0).unwrap(),
            |mut s| probe(&mut s, &cfg.grid).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, mlp_step, shatter_probe
}
criterion_main!(benches);
