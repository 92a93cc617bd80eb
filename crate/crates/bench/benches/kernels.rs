// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentqa::autograd::Tape;
use latentqa::transformer::{Input, Trainable};
use latentqa::{ModelConfig, Tensor, TransformerModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [32usize, 64, 128, 256] {
        let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| a.matmul(&b).unwrap()));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("causal_attention");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [32usize, 64, 128] {
        let q = Tensor::<f32>::randn(&[t, 64], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[t, 64], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[t, 64], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::new("forward+backward", t), &t, |bch, _| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.leaf(&q, true), tape.leaf(&k, true), tape.leaf(&v, true));
                let o = tape.causal_attention(qv, kv, vv, 4).unwrap();
                let s = tape.sum(o);
                tape.backward(s).unwrap();
            })
        });
    }
    g.finish();
}

fn model_passes(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    for (layers, hidden) in [(4usize, 64usize), (8, 64)] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = TransformerModel::<f32>::new_random(ModelConfig::new(layers, hidden, 4, 512, 128), &mut rng).unwrap();
        let tokens: Vec<usize> = (0..48).map(|i| 6 + (i * 7) % 500).collect();
        let targets: Vec<usize> = tokens[1..].iter().copied().chain([0]).collect();
        let mask: Vec<bool> = (0..tokens.len()).map(|i| i + 1 < tokens.len()).collect();
        let id = format!("L{layers}d{hidden}");
        g.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| model.forward(&tokens, None, None).unwrap())
        });
        g.bench_function(BenchmarkId::new("forward+backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bm = model.bind(&mut tape, Trainable::Base);
                let (logits, _) = model.forward_on(&mut tape, &bm, Input::Tokens(&tokens), None, &[]).unwrap();
                let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();
                tape.backward(loss).unwrap();
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, model_passes);
criterion_main!(benches);
