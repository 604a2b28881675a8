//! Character-level autoregressive pretraining.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Graph, OptimMode, Optimizer};
use crate::transformer::{TransformerConfig, TransformerModel};

/// Bijection between the distinct characters of a corpus and token ids,
/// ordered by code point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    pub fn build(corpus: &str) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let set: BTreeSet<char> = corpus.chars().collect();
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharVocab { chars, ids }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.chars.get(i).copied().ok_or(Error::Vocabulary {
                    id: i,
                    vocab_size: self.chars.len(),
                })
            })
            .collect()
    }

    /// Space-separated code points, as stored in checkpoint metadata.
    pub fn to_meta(&self) -> String {
        self.chars
            .iter()
            .map(|&c| (c as u32).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_meta(s: &str) -> Result<Self> {
        let chars = s
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Compatibility(format!("bad vocabulary entry {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if chars.is_empty() {
            return Err(Error::Compatibility("empty vocabulary".into()));
        }
        Ok(Self::from_chars(chars))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub corpus: PathBuf,
    /// `vocab_size` is replaced by the size of the corpus vocabulary.
    pub model: TransformerConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub log_interval: usize,
}

impl PretrainConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        PretrainConfig {
            corpus: corpus.into(),
            model: TransformerConfig::desk(1),
            batch_size: 16,
            learning_rate: 3e-3,
            steps: 2000,
            seed: 0,
            output: None,
            log_interval: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{}", p.step, p.loss);
        }
        s
    }

    /// Mean of the last `window` recorded losses.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let n = self.points.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.points[n.saturating_sub(window)..];
        Some(tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint<f32>,
    pub vocab: CharVocab,
    pub curve: LossCurve,
}

/// Train on the corpus file, saving the checkpoint when an output path is
/// configured.
pub fn pretrain_lm(config: &PretrainConfig) -> Result<PretrainOutput> {
    let text = std::fs::read_to_string(&config.corpus).map_err(|e| Error::io(&config.corpus, e))?;
    let out = pretrain_on_text(&text, config)?;
    if let Some(path) = &config.output {
        out.checkpoint.save(path)?;
    }
    Ok(out)
}

pub fn pretrain_on_text(text: &str, config: &PretrainConfig) -> Result<PretrainOutput> {
    config.validate()?;
    let vocab = CharVocab::build(text)?;
    let ids = vocab.encode(text)?;
    let mut model_cfg = config.model;
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate()?;
    let seq = model_cfg.context_len;
    if ids.len() < 10 * seq {
        return Err(Error::Input(format!(
            "corpus has {} characters, need at least {} (10 x context length)",
            ids.len(),
            10 * seq
        )));
    }

    let mut model = TransformerModel::<f32>::init(model_cfg, config.seed)?;
    let mut opt = Optimizer::new(OptimMode::adam(), config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_c0de);
    let mut curve = LossCurve::default();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    let max_start = ids.len() - (seq + 1);
    let mut windows = Vec::with_capacity(config.batch_size * (seq + 1));

    for step in 1..=config.steps {
        windows.clear();
        for _ in 0..config.batch_size {
            let start = rng.gen_range(0..=max_start);
            windows.extend_from_slice(&ids[start..start + seq + 1]);
        }
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind(&mut g, |_| true);
        let loss = model.lm_loss(&mut g, &bound, &windows, config.batch_size, seq)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {step}")));
        }
        g.backward(loss)?;
        opt.step(&mut model.params, &bound.grads(&g))?;
        acc += value;
        acc_n += 1;
        if step % config.log_interval == 0 {
            curve.points.push(LossPoint {
                step,
                loss: acc / acc_n as f64,
            });
            acc = 0.0;
            acc_n = 0;
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "pretrained-lm".to_string());
    meta.extend(model_cfg.to_map());
    meta.insert("vocab.codepoints".to_string(), vocab.to_meta());
    meta.insert("pretrain.seed".to_string(), config.seed.to_string());
    meta.insert("pretrain.steps".to_string(), config.steps.to_string());
    meta.insert("pretrain.batch_size".to_string(), config.batch_size.to_string());
    meta.insert("pretrain.learning_rate".to_string(), config.learning_rate.to_string());
    Ok(PretrainOutput {
        checkpoint: Checkpoint::new(meta, model.params),
        vocab,
        curve,
    })
}

/// Rebuild the language model and vocabulary stored in a pretraining
/// checkpoint.
pub fn load_lm(checkpoint: &Checkpoint<f32>) -> Result<(TransformerModel<f32>, CharVocab)> {
    let config = TransformerConfig::from_map(&checkpoint.meta)?;
    let vocab = CharVocab::from_meta(
        checkpoint
            .meta
            .get("vocab.codepoints")
            .ok_or_else(|| Error::Compatibility("checkpoint has no vocabulary".into()))?,
    )?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Compatibility(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let model = TransformerModel::from_params(config, checkpoint.params.clone())?;
    Ok((model, vocab))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
