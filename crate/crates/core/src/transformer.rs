//! Decoder-only causal transformer in the GPT-2 layout (pre-norm blocks,
//! learned positional embeddings, tanh-GELU MLP).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Width of the classification head.
    pub output_dim: usize,
}

impl TransformerConfig {
    /// Desk-scale default: embed 128, 4 layers, 4 heads, context 128.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            embed_dim: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 128,
            output_dim: 2,
        }
    }

    /// GPT-2 small shape.
    pub fn full_scale(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            embed_dim: 768,
            n_layers: 12,
            n_heads: 12,
            context_len: 1024,
            output_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("model.vocab_size", self.vocab_size),
            ("model.embed_dim", self.embed_dim),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.context_len", self.context_len),
            ("model.output_dim", self.output_dim),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            map.get(key)
                .ok_or_else(|| Error::Compatibility(format!("config is missing {key}")))?
                .parse()
                .map_err(|_| Error::Compatibility(format!("config value for {key} is not an integer")))
        };
        let cfg = TransformerConfig {
            vocab_size: get("model.vocab_size")?,
            embed_dim: get("model.embed_dim")?,
            n_layers: get("model.n_layers")?,
            n_heads: get("model.n_heads")?,
            context_len: get("model.context_len")?,
            output_dim: get("model.output_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter names of one block.
pub fn layer_param_names(layer: usize) -> Vec<String> {
    [
        "ln1.gain",
        "ln1.bias",
        "attn.query.weight",
        "attn.query.bias",
        "attn.key.weight",
        "attn.key.bias",
        "attn.value.weight",
        "attn.value.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "ln2.gain",
        "ln2.bias",
        "mlp.fc.weight",
        "mlp.fc.bias",
        "mlp.proj.weight",
        "mlp.proj.bias",
    ]
    .iter()
    .map(|s| format!("layer.{layer}.{s}"))
    .collect()
}

/// Draw a `N(0, std²)` tensor.
pub(crate) fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T: Float = f32> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> TransformerModel<T> {
    /// Seeded initialisation: weights `N(0, 0.02²)`, residual output
    /// projections scaled by `1/sqrt(2·n_layers)`, biases zero, gains one.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, l) = (config.embed_dim, config.vocab_size, config.n_layers);
        let resid_std = INIT_STD / ((2 * l) as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_embed.weight", normal_tensor(&[v, d], INIT_STD, &mut rng))?;
        p.insert(
            "pos_embed.weight",
            normal_tensor(&[config.context_len, d], INIT_STD, &mut rng),
        )?;
        for i in 0..l {
            let pre = format!("layer.{i}");
            p.insert(format!("{pre}.ln1.gain"), Tensor::full(&[d], T::one()))?;
            p.insert(format!("{pre}.ln1.bias"), Tensor::zeros(&[d]))?;
            for name in ["query", "key", "value"] {
                p.insert(
                    format!("{pre}.attn.{name}.weight"),
                    normal_tensor(&[d, d], INIT_STD, &mut rng),
                )?;
                p.insert(format!("{pre}.attn.{name}.bias"), Tensor::zeros(&[d]))?;
            }
            p.insert(
                format!("{pre}.attn.proj.weight"),
                normal_tensor(&[d, d], resid_std, &mut rng),
            )?;
            p.insert(format!("{pre}.attn.proj.bias"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.ln2.gain"), Tensor::full(&[d], T::one()))?;
            p.insert(format!("{pre}.ln2.bias"), Tensor::zeros(&[d]))?;
            p.insert(
                format!("{pre}.mlp.fc.weight"),
                normal_tensor(&[d, 4 * d], INIT_STD, &mut rng),
            )?;
            p.insert(format!("{pre}.mlp.fc.bias"), Tensor::zeros(&[4 * d]))?;
            p.insert(
                format!("{pre}.mlp.proj.weight"),
                normal_tensor(&[4 * d, d], resid_std, &mut rng),
            )?;
            p.insert(format!("{pre}.mlp.proj.bias"), Tensor::zeros(&[d]))?;
        }
        p.insert("ln_final.gain", Tensor::full(&[d], T::one()))?;
        p.insert("ln_final.bias", Tensor::zeros(&[d]))?;
        p.insert("head.lm.weight", normal_tensor(&[d, v], INIT_STD, &mut rng))?;
        p.insert("head.lm.bias", Tensor::zeros(&[v]))?;
        Ok(TransformerModel { config, params: p })
    }

    /// Wrap existing parameters, checking every expected shape.
    pub fn from_params(config: TransformerConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let model = TransformerModel { config, params };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn expected_shapes(config: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (config.embed_dim, config.vocab_size);
        let mut out = vec![
            ("tok_embed.weight".to_string(), vec![v, d]),
            ("pos_embed.weight".to_string(), vec![config.context_len, d]),
        ];
        for i in 0..config.n_layers {
            for name in layer_param_names(i) {
                let shape = if name.ends_with("mlp.fc.weight") {
                    vec![d, 4 * d]
                } else if name.ends_with("mlp.fc.bias") {
                    vec![4 * d]
                } else if name.ends_with("mlp.proj.weight") {
                    vec![4 * d, d]
                } else if name.ends_with(".weight") {
                    vec![d, d]
                } else {
                    vec![d]
                };
                out.push((name, shape));
            }
        }
        out.push(("ln_final.gain".into(), vec![d]));
        out.push(("ln_final.bias".into(), vec![d]));
        out.push(("head.lm.weight".into(), vec![d, v]));
        out.push(("head.lm.bias".into(), vec![v]));
        out
    }

    pub fn check_shapes(&self) -> Result<()> {
        check_core_shapes(&self.params, &self.config, true)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                context_len: self.config.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Batched language-model logits `[batch*seq, vocab]` for row-major ids.
    pub fn lm_logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        ids: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if ids.len() != batch * seq || seq == 0 {
            return Err(Error::Shape(format!(
                "{} ids do not form {batch} sequences of length {seq}",
                ids.len()
            )));
        }
        for chunk in ids.chunks(seq) {
            self.check_ids(chunk)?;
        }
        let tok = g.gather(bound.var("tok_embed.weight")?, ids)?;
        let x = add_positions(g, bound, tok, batch, seq)?;
        let h = encode(g, bound, &self.config, x, batch, seq)?;
        let logits = g.matmul(h, bound.var("head.lm.weight")?)?;
        g.add_row(logits, bound.var("head.lm.bias")?)
    }

    /// Next-token logits `[t, vocab]` for a single sequence.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let out = self.lm_logits(&mut g, &bound, ids, 1, ids.len())?;
        Ok(g.take_leaf(out))
    }

    /// Mean next-token cross-entropy over a batch of windows, where `ids`
    /// holds `batch` windows of `seq + 1` tokens.
    pub fn lm_loss(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        windows: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if windows.len() != batch * (seq + 1) {
            return Err(Error::Shape(format!(
                "expected {batch} windows of {} tokens",
                seq + 1
            )));
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for w in windows.chunks(seq + 1) {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        let logits = self.lm_logits(g, bound, &inputs, batch, seq)?;
        g.cross_entropy(logits, &targets)
    }

    /// The attention sub-block of `layer` applied to `x[t, d]` directly (no
    /// layer norm, no residual).
    pub fn causal_self_attention(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.embed_dim;
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension {
                op: "causal_self_attention",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.context_len, d],
            });
        }
        let t = x.shape()[0];
        if t > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: t,
                context_len: self.config.context_len,
            });
        }
        if layer >= self.config.n_layers {
            return Err(Error::Index {
                what: "layers",
                index: layer,
                len: self.config.n_layers,
            });
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = attention_block(&mut g, &bound, &self.config, layer, xv, 1, t)?;
        Ok(g.take_leaf(out))
    }

    /// Autoregressive sampling. `temperature == 0` selects the argmax.
    pub fn generate(
        &self,
        prompt: &[usize],
        steps: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Input("generation needs a non-empty prompt".into()));
        }
        if prompt.len() + steps > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: prompt.len() + steps,
                context_len: self.config.context_len,
            });
        }
        if !(temperature >= 0.0) {
            return Err(Error::Input(format!("temperature must be >= 0, got {temperature}")));
        }
        self.check_ids(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = prompt.to_vec();
        for _ in 0..steps {
            let logits = self.forward(&tokens)?;
            let v = self.config.vocab_size;
            let last: Vec<f64> = logits.data()[(tokens.len() - 1) * v..]
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect();
            let next = if temperature == 0.0 {
                argmax(&last)
            } else {
                sample(&last, temperature, rng.gen::<f64>())
            };
            tokens.push(next);
        }
        Ok(tokens)
    }
}

pub(crate) fn check_core_shapes<T: Float>(
    params: &ParamStore<T>,
    config: &TransformerConfig,
    with_lm: bool,
) -> Result<()> {
    for (name, shape) in TransformerModel::<T>::expected_shapes(config) {
        let lm_only = name.starts_with("tok_embed") || name.starts_with("head.lm");
        if lm_only && !with_lm {
            continue;
        }
        let t = params.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Compatibility(format!(
                "parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, u: f64) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Add `pos_embed` rows `0..seq` to each sequence of `x[batch*seq, d]`.
pub(crate) fn add_positions<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let table = bound.var("pos_embed.weight")?;
    let ctx = g.value(table).shape()[0];
    if seq > ctx {
        return Err(Error::ContextOverflow {
            len: seq,
            context_len: ctx,
        });
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = g.gather(table, &positions)?;
    g.add(x, pos)
}

fn linear<T: Float>(g: &mut Graph<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, bound.var(&format!("{prefix}.weight"))?)?;
    g.add_row(y, bound.var(&format!("{prefix}.bias"))?)
}

fn attention_block<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &TransformerConfig,
    layer: usize,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let pre = format!("layer.{layer}.attn");
    let q = linear(g, bound, x, &format!("{pre}.query"))?;
    let k = linear(g, bound, x, &format!("{pre}.key"))?;
    let v = linear(g, bound, x, &format!("{pre}.value"))?;
    let a = g.causal_attention(q, k, v, batch, seq, config.n_heads)?;
    linear(g, bound, a, &format!("{pre}.proj"))
}

fn layer_norm<T: Float>(g: &mut Graph<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let gain = bound.var(&format!("{prefix}.gain"))?;
    let bias = bound.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Run the transformer blocks and the final layer norm over embedded
/// inputs `x[batch*seq, d]`.
pub(crate) fn encode<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &TransformerConfig,
    mut x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    for layer in 0..config.n_layers {
        let pre = format!("layer.{layer}");
        let h = layer_norm(g, bound, x, &format!("{pre}.ln1"))?;
        let a = attention_block(g, bound, config, layer, h, batch, seq)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, bound, x, &format!("{pre}.ln2"))?;
        let h = linear(g, bound, h, &format!("{pre}.mlp.fc"))?;
        let h = g.gelu(h);
        let h = linear(g, bound, h, &format!("{pre}.mlp.proj"))?;
        x = g.add(x, h)?;
    }
    layer_norm(g, bound, x, "ln_final")
}
