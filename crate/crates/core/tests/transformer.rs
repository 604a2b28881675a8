use std::path::Path;

use fpt_core::checkpoint::Checkpoint;
use fpt_core::tensor::{Graph, ParamStore, Tensor};
use fpt_core::transformer::{TransformerConfig, TransformerModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(rng: &mut ChaCha8Rng) -> TransformerConfig {
    let heads = rng.gen_range(1..=3);
    TransformerConfig {
        vocab_size: rng.gen_range(2..20),
        embed_dim: heads * rng.gen_range(2..=6),
        n_layers: rng.gen_range(1..=2),
        n_heads: heads,
        context_len: rng.gen_range(2..=12),
        output_dim: 2,
    }
}

#[test]
fn logits_ignore_future_tokens_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let cfg = config(&mut rng);
        let model = TransformerModel::<f32>::init(cfg, case).unwrap();
        let t = rng.gen_range(2..=cfg.context_len);
        let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let i = rng.gen_range(0..t - 1);
        let mut perturbed = ids.clone();
        for tok in &mut perturbed[i + 1..] {
            *tok = (*tok + rng.gen_range(1..cfg.vocab_size)) % cfg.vocab_size;
        }
        let a = model.forward(&ids).unwrap();
        let b = model.forward(&perturbed).unwrap();
        let v = cfg.vocab_size;
        let row_a = &a.data()[..(i + 1) * v];
        let row_b = &b.data()[..(i + 1) * v];
        assert!(
            row_a.iter().zip(row_b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "case {case}: prefix logits changed"
        );
    }
}

fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive(
        (m, k, n, a, b) in (1usize..9, 1usize..9, 1usize..9)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), matrix(m, k), matrix(k, n)))
    ) {
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(&[m, k], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(&[k, n], b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        let want = naive_matmul(m, k, n, &a, &b);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_matches_definition(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[rows, cols], x.clone()).unwrap());
        let s = g.softmax(v, 1).unwrap();
        for (r, row) in g.value(s).data().chunks(cols).enumerate() {
            let src = &x[r * cols..][..cols];
            let z: f64 = src.iter().map(|v| v.exp()).sum();
            for (p, v) in row.iter().zip(src) {
                prop_assert!((p - v.exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_matches_definition(cols in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..cols).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gain: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bias: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::new();
        let vx = g.constant(Tensor::new(&[1, cols], x.clone()).unwrap());
        let vg = g.constant(Tensor::new(&[cols], gain.clone()).unwrap());
        let vb = g.constant(Tensor::new(&[cols], bias.clone()).unwrap());
        let y = g.layer_norm(vx, vg, vb, 1e-5).unwrap();
        let mean = x.iter().sum::<f64>() / cols as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        for j in 0..cols {
            let want = (x[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j];
            prop_assert!((g.value(y).data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_matches_definition(rows in 1usize..5, cols in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[rows, cols], x.clone()).unwrap());
        let l = g.cross_entropy(v, &t).unwrap();
        let want: f64 = (0..rows)
            .map(|r| {
                let row = &x[r * cols..][..cols];
                row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[t[r]]
            })
            .sum::<f64>()
            / rows as f64;
        prop_assert!((g.value(l).item() - want).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trips_bitwise(seed in any::<u64>(), f64_store in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config(&mut rng);
        let model = TransformerModel::<f32>::init(cfg, seed).unwrap();
        let meta = cfg.to_map();
        if f64_store {
            let p: ParamStore<f64> = model.params.cast();
            let ck = Checkpoint::new(meta, p);
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        } else {
            let ck = Checkpoint::new(meta, model.params.clone());
            let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            for ((n, a), (m, b)) in ck.params.iter().zip(back.params.iter()) {
                prop_assert_eq!(n, m);
                prop_assert!(a.bit_eq(b));
            }
            prop_assert_eq!(TransformerConfig::from_map(&back.meta).unwrap(), cfg);
        }
    }
}

#[test]
fn gelu_matches_tanh_formula() {
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 / 8.0).collect();
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
    let y = g.gelu(v);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for (x, got) in xs.iter().zip(g.value(y).data()) {
        let want = 0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh());
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let model = TransformerModel::<f32>::init(TransformerConfig::desk(5), 0).unwrap();
    let bytes = Checkpoint::new(Default::default(), model.params).to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.fptk");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = Checkpoint::<f32>::load(&path).unwrap_err();
    assert!(matches!(err, fpt_core::Error::Format { .. }), "{err:?}");
}
