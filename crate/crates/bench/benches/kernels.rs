use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fpt_core::chaoscrypt::{encrypt, keygen, keystream_bytes, CipherMode, Plaintext};
use fpt_core::datapipe::synth_dataset;
use fpt_core::fpt::ClassifierModel;
use fpt_core::metrics::{auroc, ScoredSample};
use fpt_core::transformer::{TransformerConfig, TransformerModel};
use fpt_core::{Graph, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = Tensor::<f32>::new(&[n, n], (0..n * n).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        let b = a.clone();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(va, vb).unwrap());
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let cfg = TransformerConfig {
        vocab_size: 64,
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        context_len: 32,
        output_dim: 2,
    };
    let lm = TransformerModel::<f32>::init(cfg, 0).unwrap();
    let ids: Vec<usize> = (0..32).map(|i| i % 64).collect();
    c.bench_function("lm_forward_ctx32", |b| b.iter(|| black_box(lm.forward(&ids).unwrap())));

    let clf = ClassifierModel::random(cfg, 32, 8, 0).unwrap();
    let data = synth_dataset(16, 32, 0.1, 0).unwrap();
    let images: Vec<_> = data.items.iter().map(|it| &it.image).collect();
    c.bench_function("classifier_predict_batch32", |b| b.iter(|| black_box(clf.predict(&images).unwrap())));
}

fn chebyshev(c: &mut Criterion) {
    c.bench_function("keystream_bytes_1024", |b| {
        b.iter(|| black_box(keystream_bytes(black_box(0.3141), 1024).unwrap()))
    });
    let key = keygen(1);
    let plain = Plaintext::Bytes {
        rows: 32,
        cols: 32,
        data: (0..1024).map(|i| i as u8).collect(),
    };
    c.bench_function("encrypt_byte_32x32", |b| {
        b.iter(|| black_box(encrypt(&plain, &key.public, 123_457, CipherMode::Byte).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let samples: Vec<ScoredSample> = (0..10_000)
        .map(|i| ScoredSample::new(((i * 7919) % 1000) as f64 / 1000.0, (i % 3 == 0) as u8))
        .collect();
    c.bench_function("auroc_10k", |b| b.iter(|| black_box(auroc(&samples).unwrap())));
}

criterion_group!(benches, matmul, forward, chebyshev, metrics);
criterion_main!(benches);
