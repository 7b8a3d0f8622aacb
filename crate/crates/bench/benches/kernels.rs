use criterion::{criterion_group, criterion_main, Criterion};
use pipa::data::{gen_static_dataset, SceneConfig};
use pipa::engine::{train_step, TrainConfig, TrainData, TrainState};
use pipa::losses::Scenario;
use pipa::Graph;
use pipa_bench::uniform;

fn matmul(c: &mut Criterion) {
    let (a, b) = (uniform(&[256, 64], 1), uniform(&[64, 256], 2));
    c.bench_function("matmul 256x64x256 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.param(a.clone()), g.param(b.clone()));
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z);
            g.backward(s).unwrap();
        })
    });
}

fn conv(c: &mut Criterion) {
    let (x, w) = (uniform(&[2, 32, 32, 32], 3), uniform(&[64, 32, 3, 3], 4));
    c.bench_function("conv2d 2x32x32x32 -> 64 k3 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
        })
    });
}

fn step(c: &mut Criterion) {
    let ds = gen_static_dataset(&SceneConfig::default(), 8, 8, 2, 0).unwrap();
    let data = TrainData::new(&ds, Scenario::Static).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, on) in [("baseline", false), ("pixel+patch", true)] {
        let mut cfg = TrainConfig::default();
        cfg.use_pixel = on;
        cfg.use_patch = on;
        let mut state = TrainState::new(cfg).unwrap();
        group.bench_function(name, |bench| bench.iter(|| train_step(&mut state, &data).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, step);
criterion_main!(benches);
