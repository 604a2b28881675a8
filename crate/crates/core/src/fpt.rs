//! Frozen-pretrained-transformer image classification: patch tokens, a
//! trainable input projection and head around a frozen transformer core.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use glob::Pattern;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::datapipe::{Image, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::metrics::ScoredSample;
use crate::tensor::{Bound, Graph, OptimMode, Optimizer, ParamStore, Tensor, Var};
use crate::transformer::{
    add_positions, check_core_shapes, encode, normal_tensor, TransformerConfig, TransformerModel,
};

pub const DEFAULT_SIDE: usize = 32;
pub const DEFAULT_PATCH: usize = 8;
const HEAD_INIT_STD: f64 = 0.02;
const CLASSIFIER_KIND: &str = "fpt-classifier";

/// Split an `s×s` image into `(s/p)²` row-major patches of `p²` pixels.
pub fn patchify(image: &Image, patch: usize) -> Result<Vec<f32>> {
    let s = image.height;
    if !image.is_square() || patch == 0 || s % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image cannot be cut into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let per = s / patch;
    let mut out = Vec::with_capacity(s * s);
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..patch {
                let row = (pr * patch + r) * s + pc * patch;
                out.extend_from_slice(&image.pixels[row..row + patch]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], side: usize, patch: usize) -> Result<Image> {
    if patch == 0 || side % patch != 0 || tokens.len() != side * side {
        return Err(Error::Shape(format!(
            "{} values do not form {patch}x{patch} patches of a {side}x{side} image",
            tokens.len()
        )));
    }
    let per = side / patch;
    let mut img = Image::zeros(side, side);
    let mut it = tokens.iter();
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..patch {
                for c in 0..patch {
                    img.set(pr * patch + r, pc * patch + c, *it.next().unwrap());
                }
            }
        }
    }
    Ok(img)
}

/// Glob patterns selecting trainable parameters; `frozen` patterns win.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl Default for FreezePlan {
    /// Input projection, output head, positional embeddings and every
    /// layer-norm gain and bias.
    fn default() -> Self {
        FreezePlan {
            trainable: [
                "input.proj.*",
                "head.cls.*",
                "pos_embed.*",
                "*.ln1.*",
                "*.ln2.*",
                "ln_final.*",
            ]
            .map(String::from)
            .to_vec(),
            frozen: Vec::new(),
        }
    }
}

impl FreezePlan {
    /// Everything trainable.
    pub fn full() -> Self {
        FreezePlan {
            trainable: vec!["*".into()],
            frozen: Vec::new(),
        }
    }

    /// Split names into `(trainable, frozen)`.
    pub fn resolve<'a>(
        &self,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<(Vec<String>, Vec<String>)> {
        if self.trainable.is_empty() {
            return Err(Error::Config("freeze plan has no trainable patterns".into()));
        }
        let compile = |ps: &[String]| -> Result<Vec<(String, Pattern)>> {
            ps.iter()
                .map(|p| {
                    Pattern::new(p)
                        .map(|c| (p.clone(), c))
                        .map_err(|e| Error::Config(format!("bad pattern {p:?}: {e}")))
                })
                .collect()
        };
        let train = compile(&self.trainable)?;
        let frozen = compile(&self.frozen)?;
        let names: Vec<&str> = names.into_iter().collect();
        for (raw, pat) in train.iter().chain(&frozen) {
            if !names.iter().any(|n| pat.matches(n)) {
                return Err(Error::Config(format!("pattern {raw:?} matches no parameter")));
            }
        }
        let (mut t, mut f) = (Vec::new(), Vec::new());
        for n in names {
            let on = train.iter().any(|(_, p)| p.matches(n)) && !frozen.iter().any(|(_, p)| p.matches(n));
            if on {
                t.push(n.to_string());
            } else {
                f.push(n.to_string());
            }
        }
        if t.is_empty() {
            return Err(Error::Config("freeze plan leaves no trainable parameter".into()));
        }
        Ok((t, f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: usize,
    pub total_count: usize,
}

/// Resolve `plan` against the model and build an optimizer whose freeze
/// mask is exactly the frozen partition.
pub fn apply_freeze_plan(
    model: &ClassifierModel,
    plan: &FreezePlan,
    mode: OptimMode,
    lr: f64,
) -> Result<(FreezeReport, Optimizer<f32>)> {
    let (trainable, frozen) = plan.resolve(model.params.names())?;
    let trainable_count = trainable
        .iter()
        .map(|n| model.params.require(n).map(|t| t.numel()))
        .sum::<Result<usize>>()?;
    let opt = Optimizer::new(mode, lr)?.with_freeze_mask(frozen.iter().cloned());
    Ok((
        FreezeReport {
            trainable,
            frozen,
            trainable_count,
            total_count: model.params.numel(),
        },
        opt,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    #[default]
    MeanPool,
    LastToken,
}

impl FromStr for Readout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean-pool" => Ok(Readout::MeanPool),
            "last" | "last-token" => Ok(Readout::LastToken),
            other => Err(Error::Config(format!("unknown readout {other:?}"))),
        }
    }
}

impl Readout {
    pub fn as_str(self) -> &'static str {
        match self {
            Readout::MeanPool => "mean",
            Readout::LastToken => "last",
        }
    }
}

/// Transformer core plus `input.proj` (patch pixels to embedding) and
/// `head.cls` (embedding to class logits).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub config: TransformerConfig,
    pub side: usize,
    pub patch: usize,
    pub readout: Readout,
    pub params: ParamStore<f32>,
}

impl ClassifierModel {
    fn check_geometry(config: &TransformerConfig, side: usize, patch: usize) -> Result<usize> {
        if patch == 0 || side == 0 || side % patch != 0 {
            return Err(Error::Shape(format!(
                "image side {side} is not divisible by patch {patch}"
            )));
        }
        let tokens = (side / patch).pow(2);
        if tokens > config.context_len {
            return Err(Error::Compatibility(format!(
                "{tokens} patch tokens exceed the context length {}",
                config.context_len
            )));
        }
        if config.output_dim != 2 {
            return Err(Error::Config(format!(
                "binary classifier needs output_dim 2, got {}",
                config.output_dim
            )));
        }
        Ok(tokens)
    }

    fn add_adapters(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e45);
        let (d, p2) = (self.config.embed_dim, self.patch * self.patch);
        self.params
            .insert("input.proj.weight", normal_tensor(&[p2, d], HEAD_INIT_STD, &mut rng))?;
        self.params.insert("input.proj.bias", Tensor::zeros(&[d]))?;
        self.params.insert(
            "head.cls.weight",
            normal_tensor(&[d, self.config.output_dim], HEAD_INIT_STD, &mut rng),
        )?;
        self.params
            .insert("head.cls.bias", Tensor::zeros(&[self.config.output_dim]))?;
        Ok(())
    }

    /// Core taken from a trained language model; the token embedding and
    /// LM head are dropped and fresh adapters are added.
    pub fn from_lm(
        lm: &TransformerModel<f32>,
        side: usize,
        patch: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut config = lm.config;
        config.output_dim = 2;
        Self::check_geometry(&config, side, patch)?;
        check_core_shapes(&lm.params, &config, false)?;
        let mut params = lm.params.clone();
        for name in ["tok_embed.weight", "head.lm.weight", "head.lm.bias"] {
            params.remove(name);
        }
        let mut m = ClassifierModel {
            config,
            side,
            patch,
            readout: Readout::default(),
            params,
        };
        m.add_adapters(seed)?;
        Ok(m)
    }

    /// Load the core from a pretraining checkpoint.
    pub fn from_pretrained(
        ckpt: &Checkpoint<f32>,
        side: usize,
        patch: usize,
        seed: u64,
    ) -> Result<Self> {
        let config = TransformerConfig::from_map(&ckpt.meta)?;
        let lm = TransformerModel {
            config,
            params: ckpt.params.clone(),
        };
        Self::from_lm(&lm, side, patch, seed)
    }

    /// Randomly initialised core, the no-pretraining baseline.
    pub fn random(config: TransformerConfig, side: usize, patch: usize, seed: u64) -> Result<Self> {
        let lm = TransformerModel::<f32>::init(config, seed)?;
        Self::from_lm(&lm, side, patch, seed)
    }

    pub fn tokens(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), CLASSIFIER_KIND.to_string());
        meta.extend(self.config.to_map());
        meta.insert("fpt.side".into(), self.side.to_string());
        meta.insert("fpt.patch".into(), self.patch.to_string());
        meta.insert("fpt.readout".into(), self.readout.as_str().into());
        Checkpoint::new(meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        if ckpt.meta.get("kind").map(String::as_str) != Some(CLASSIFIER_KIND) {
            return Err(Error::Compatibility("checkpoint is not a classifier".into()));
        }
        let config = TransformerConfig::from_map(&ckpt.meta)?;
        let num = |k: &str| -> Result<usize> {
            ckpt.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks a valid {k}")))
        };
        let (side, patch) = (num("fpt.side")?, num("fpt.patch")?);
        Self::check_geometry(&config, side, patch)?;
        let readout = ckpt
            .meta
            .get("fpt.readout")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or_default();
        check_core_shapes(&ckpt.params, &config, false)?;
        let (d, p2) = (config.embed_dim, patch * patch);
        for (name, shape) in [
            ("input.proj.weight", vec![p2, d]),
            ("input.proj.bias", vec![d]),
            ("head.cls.weight", vec![d, config.output_dim]),
            ("head.cls.bias", vec![config.output_dim]),
        ] {
            let t = ckpt.params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ClassifierModel {
            config,
            side,
            patch,
            readout,
            params: ckpt.params.clone(),
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.side || image.width != self.side {
            return Err(Error::Shape(format!(
                "image is {}x{}, classifier expects {}x{}",
                image.height, image.width, self.side, self.side
            )));
        }
        Ok(())
    }

    /// Class logits `[batch, 2]` for a batch of images.
    pub fn logits(&self, g: &mut Graph<f32>, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let (seq, p2) = (self.tokens(), self.patch * self.patch);
        let mut pix = Vec::with_capacity(batch * seq * p2);
        for img in images {
            self.check_image(img)?;
            pix.extend(patchify(img, self.patch)?);
        }
        let x = g.constant(Tensor::new(&[batch * seq, p2], pix)?);
        let x = g.matmul(x, bound.var("input.proj.weight")?)?;
        let x = g.add_row(x, bound.var("input.proj.bias")?)?;
        let x = add_positions(g, bound, x, batch, seq)?;
        let h = encode(g, bound, &self.config, x, batch, seq)?;
        let pooled = match self.readout {
            Readout::MeanPool => g.mean_pool(h, batch)?,
            Readout::LastToken => {
                let rows: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
                g.select_rows(h, &rows)?
            }
        };
        let y = g.matmul(pooled, bound.var("head.cls.weight")?)?;
        g.add_row(y, bound.var("head.cls.bias")?)
    }

    /// Class probabilities, one `[p0, p1]` per image.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let logits = self.logits(&mut g, &bound, images)?;
        Ok(g.value(logits).data().chunks_exact(2).map(softmax2).collect())
    }
}

fn softmax2(l: &[f32]) -> [f64; 2] {
    let (a, b) = (l[0] as f64, l[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let p0 = ea / (ea + eb);
    [p0, 1.0 - p0]
}

/// `(p0, p1)` for one image.
pub fn classify(model: &ClassifierModel, image: &Image) -> Result<(f64, f64)> {
    let p = model.predict(&[image])?[0];
    Ok((p[0], p[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and at the end).
    pub eval_every: usize,
    pub optimizer: OptimMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 1,
            optimizer: OptimMode::adam(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curves {
    pub records: Vec<EpochRecord>,
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,test_loss,test_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch whose test accuracy reaches `acc`.
    pub fn first_reaching(&self, acc: f64) -> Option<usize> {
        self.records.iter().find(|r| r.test_acc >= acc).map(|r| r.epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_BATCH: usize = 64;

/// Class-1 probability for every item, in dataset order.
pub fn score_dataset(model: &ClassifierModel, data: &LabeledImageDataset) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.items.chunks(EVAL_BATCH) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        for (p, it) in model.predict(&imgs)?.into_iter().zip(chunk) {
            out.push(ScoredSample {
                score: p[1],
                label: it.label,
            });
        }
    }
    Ok(out)
}

/// Mean cross-entropy and argmax accuracy.
pub fn evaluate(model: &ClassifierModel, data: &LabeledImageDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let scored = score_dataset(model, data)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for s in &scored {
        let p = if s.label == 1 { s.score } else { 1.0 - s.score };
        loss -= p.max(1e-300).ln();
        if (s.score > 0.5) == (s.label == 1) {
            correct += 1;
        }
    }
    let n = scored.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub model: ClassifierModel,
    pub curves: Curves,
    pub freeze: FreezeReport,
}

/// Train the adapters (and whatever else `plan` leaves trainable) with Adam
/// on mini-batches, recording train and test curves.
pub fn finetune(
    model: ClassifierModel,
    train: &LabeledImageDataset,
    test: &LabeledImageDataset,
    config: &FinetuneConfig,
    plan: &FreezePlan,
) -> Result<FinetuneOutput> {
    finetune_with(model, train, test, config, plan, |_, _| Ok(false))
}

/// [`finetune`] with a hook called after every evaluation; returning
/// `true` stops training early.
pub fn finetune_with<F>(
    mut model: ClassifierModel,
    train: &LabeledImageDataset,
    test: &LabeledImageDataset,
    config: &FinetuneConfig,
    plan: &FreezePlan,
    mut on_eval: F,
) -> Result<FinetuneOutput>
where
    F: FnMut(&ClassifierModel, &EpochRecord) -> Result<bool>,
{
    config.validate()?;
    train.require_two_classes()?;
    test.require_two_classes()?;
    for (what, d) in [("train", train), ("test", test)] {
        if d.side != model.side {
            return Err(Error::Shape(format!(
                "{what} images are {0}x{0}, classifier expects {1}x{1}",
                d.side, model.side
            )));
        }
    }
    let (freeze, mut opt) =
        apply_freeze_plan(&model, plan, config.optimizer, config.learning_rate)?;
    let trainable: BTreeSet<String> = freeze.trainable.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e7_0b5e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Curves::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &train.items[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.items[i].label as usize).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, |n| trainable.contains(n));
            let logits = model.logits(&mut g, &bound, &imgs)?;
            for (row, &y) in g.value(logits).data().chunks_exact(2).zip(&labels) {
                if usize::from(row[1] > row[0]) == y {
                    correct += 1;
                }
            }
            let loss = g.cross_entropy(logits, &labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value * idx.len() as f64;
            g.backward(loss)?;
            opt.step(&mut model.params, &bound.grads(&g))?;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let ev = evaluate(&model, test)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_acc: correct as f64 / train.len() as f64,
                test_loss: ev.loss,
                test_acc: ev.accuracy,
            };
            curves.records.push(record);
            if on_eval(&model, &record)? {
                break;
            }
        }
    }
    Ok(FinetuneOutput {
        model,
        curves,
        freeze,
    })
}

/// Names of tensors that differ bitwise between two parameter stores.
pub fn changed_parameters(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
    before
        .iter()
        .filter(|(n, t)| after.get(n).map_or(true, |u| !t.bit_eq(u)))
        .map(|(n, _)| n.to_string())
        .collect()
}
