use std::collections::HashMap;

use fpt_core::checkpoint::Checkpoint;
use fpt_core::corpus::builtin_corpus;
use fpt_core::pretrain::*;
use fpt_core::transformer::{TransformerConfig, TransformerModel};
use fpt_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> TransformerConfig {
    TransformerConfig {
        vocab_size: 1,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 4,
        context_len: 32,
        output_dim: 2,
    }
}

fn config(steps: usize, seed: u64) -> PretrainConfig {
    let mut c = PretrainConfig::new("unused");
    c.model = small();
    c.steps = steps;
    c.seed = seed;
    c.log_interval = 5;
    c
}

fn frequencies(text: &str, vocab: &CharVocab) -> Vec<f64> {
    let mut counts: HashMap<char, usize> = HashMap::new();
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
    }
    let n = text.chars().count() as f64;
    vocab
        .chars()
        .iter()
        .map(|c| *counts.get(c).unwrap_or(&0) as f64 / n)
        .collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn training_beats_uniform_and_samples_resemble_corpus() {
    let text = builtin_corpus(100_000, 3);
    let out = pretrain_on_text(&text, &config(300, 1)).unwrap();
    let v = out.vocab.len() as f64;
    let smoothed = out.curve.tail_mean(50).unwrap();
    assert!(smoothed < v.ln(), "loss {smoothed} vs ln V {}", v.ln());

    let (model, vocab) = load_lm(&out.checkpoint).unwrap();
    let mut generated = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..40 {
        let start = rng.gen_range(0..vocab.len());
        let ids = model.generate(&[start], 31, 0.8, seed).unwrap();
        generated.push_str(&vocab.decode(&ids[1..]).unwrap());
    }
    let corpus_freq = frequencies(&text, &vocab);
    let uniform = vec![1.0 / v; vocab.len()];
    let model_l1 = l1(&frequencies(&generated, &vocab), &corpus_freq);
    assert!(model_l1 < l1(&uniform, &corpus_freq), "{model_l1}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let text = builtin_corpus(20_000, 4);
    let a = pretrain_on_text(&text, &config(10, 9)).unwrap();
    let b = pretrain_on_text(&text, &config(10, 9)).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.curve, b.curve);
    let c = pretrain_on_text(&text, &config(10, 10)).unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn zero_steps_keeps_the_initialisation() {
    let text = builtin_corpus(20_000, 5);
    let out = pretrain_on_text(&text, &config(0, 3)).unwrap();
    assert!(out.curve.points.is_empty());
    let mut cfg = small();
    cfg.vocab_size = out.vocab.len();
    let init = TransformerModel::<f32>::init(cfg, 3).unwrap();
    assert_eq!(out.checkpoint.params, init.params);
}

#[test]
fn short_corpus_and_bad_paths_are_rejected() {
    let err = pretrain_on_text("abc", &config(1, 0)).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1, 0);
    c.corpus = dir.path().join("missing.txt");
    assert!(matches!(pretrain_lm(&c), Err(Error::Io { .. })));
}

#[test]
fn saved_checkpoint_reloads_bitwise_with_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, builtin_corpus(20_000, 6)).unwrap();
    let mut c = config(3, 1);
    c.corpus = corpus;
    c.output = Some(dir.path().join("lm.fptk"));
    let out = pretrain_lm(&c).unwrap();
    let back = Checkpoint::<f32>::load(dir.path().join("lm.fptk")).unwrap();
    assert_eq!(back, out.checkpoint);
    let (_, vocab) = load_lm(&back).unwrap();
    assert_eq!(vocab, out.vocab);
}

#[test]
fn vocab_round_trips_random_ids() {
    let vocab = CharVocab::build("hello, wörld!").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let ids: Vec<usize> = (0..rng.gen_range(0..30)).map(|_| rng.gen_range(0..vocab.len())).collect();
        assert_eq!(vocab.encode(&vocab.decode(&ids).unwrap()).unwrap(), ids);
    }
}
