use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use es2emb_core::embedder::{mean_pool_last_k, PoolingConfig};
use es2emb_core::evaluator::{fit_probe, roc_auc, ProbeConfig};
use es2emb_core::synthetic::load_synthetic;
use es2emb_core::tensor::Matrix;
use es2emb_core::tinylm::{tokenize_fit, LmConfig, TinyLm};
use es2emb_core::{parse_pipe, serialize_pipe, Label, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/data/synthetic1000");

fn model() -> TinyLm {
    TinyLm::new(LmConfig { n_layers: 2, hidden_dim: 32, n_heads: 2, context_len: 512, vocab_size: 257, seed: 0 })
        .expect("valid config")
}

fn lm(c: &mut Criterion) {
    let (ds, dicts) = load_synthetic(Path::new(DATA), "bench").expect("bundled dataset");
    let text = serialize_pipe(&ds.sequences[0], &ds.schema, &dicts).text;
    let tokens = tokenize_fit(&text, 512);
    let m = model();
    let mut g = c.benchmark_group("tinylm");
    g.sample_size(20);
    g.bench_function("forward_d32_l2", |b| b.iter(|| m.forward(black_box(tokens.ids())).unwrap()));
    g.bench_function("loss_and_grad_d32_l2", |b| b.iter(|| m.loss_and_grad(black_box(tokens.ids())).unwrap()));
    g.bench_function("hidden_states_and_pool", |b| {
        b.iter(|| {
            let h = m.hidden_states(black_box(tokens.ids())).unwrap();
            mean_pool_last_k(&h, PoolingConfig::default()).unwrap()
        })
    });
    g.finish();
}

fn serializer(c: &mut Criterion) {
    let (ds, dicts) = load_synthetic(Path::new(DATA), "bench").expect("bundled dataset");
    let seq = &ds.sequences[0];
    let text = serialize_pipe(seq, &ds.schema, &dicts).text;
    c.bench_function("serialize_pipe", |b| b.iter(|| serialize_pipe(black_box(seq), &ds.schema, &dicts)));
    c.bench_function("parse_pipe", |b| b.iter(|| parse_pipe(black_box(&text), "u", &ds.schema, &dicts).unwrap()));
}

fn evaluator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let scores: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y)) + rng.random_range(-1.5..1.5)).collect();
    c.bench_function("roc_auc_10k", |b| b.iter(|| roc_auc(black_box(&scores), &labels).unwrap()));

    let (rows, d) = (900, 32);
    let y: Vec<Label> = (0..rows).map(|_| Label::Class(usize::from(rng.random_bool(0.5)))).collect();
    let data = y
        .iter()
        .flat_map(|l| {
            let shift = if *l == Label::Class(1) { 0.3 } else { 0.0 };
            (0..d).map(|_| rng.random_range(-1.0..1.0) + shift).collect::<Vec<f64>>()
        })
        .collect();
    let x = Matrix::from_vec(rows, d, data);
    let cfg = ProbeConfig::default();
    let mut g = c.benchmark_group("probe");
    g.sample_size(20);
    g.bench_function("logistic_900x32", |b| {
        b.iter(|| fit_probe(black_box(&x), &y, Task::BinaryClassification, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, lm, serializer, evaluator);
criterion_main!(benches);
