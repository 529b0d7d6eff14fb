use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use triplecheck::diff::{Tape, Tensor};
use triplecheck::objective::{contrastive_loss, joint_loss_on, TrainConfig};
use triplecheck::{build_views, score_all};
use triplecheck_bench::{batch, desk_graph, desk_model, desk_views};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn views(c: &mut Criterion) {
    let g = desk_graph();
    c.bench_function("build_views/desk", |b| b.iter(|| build_views(black_box(&g), None, 2).unwrap()));
}

/// One optimizer-free training iteration: forward, loss and backward.
fn train_step(c: &mut Criterion) {
    let g = desk_graph();
    let vg = desk_views(&g);
    let model = desk_model(&g, &vg);
    let (idx, neg) = batch(&g, 256);
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("batch_256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true).unwrap();
            let loss = joint_loss_on(&mut tape, &bound, &model, &g, &vg, &idx, &neg, &cfg).unwrap();
            tape.backward(loss.total).unwrap();
            black_box(tape.value(loss.total).data()[0])
        })
    });
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let g = desk_graph();
    let vg = desk_views(&g);
    let model = desk_model(&g, &vg);
    let mut group = c.benchmark_group("score");
    group.sample_size(10);
    group.bench_function("all_triples", |b| b.iter(|| score_all(&g, &vg, &model, 0.1).unwrap()));
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let gates = random(4096, 200, 1);
    let prev = random(4096, 50, 2);
    c.bench_function("lstm_cell/4096x50", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let gv = tape.leaf(gates.clone()).unwrap();
            let cv = tape.leaf(prev.clone()).unwrap();
            let hc = tape.lstm_cell(gv, Some(cv)).unwrap();
            let s = tape.sum(hc).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.value(s).data()[0])
        })
    });
    let x = random(256, 100, 3);
    let z = random(256, 100, 4);
    c.bench_function("contrastive/256x100", |b| b.iter(|| contrastive_loss(&x, &z, 0.5, false).unwrap()));
}

criterion_group!(benches, views, train_step, scoring, kernels);
criterion_main!(benches);
