use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fpt_core::chaoscrypt::{encrypt_dataset as encrypt_images, ephemeral_degree, keygen, ChebyshevParams, CipherMode};
use fpt_core::checkpoint::Checkpoint;
use fpt_core::corpus::builtin_corpus;
use fpt_core::datapipe::{load_image_dir, split, synth_train_test, LabeledImageDataset, LoadOptions, SplitSpec};
use fpt_core::fpt::{
    finetune_with, score_dataset, ClassifierModel, FinetuneConfig, FreezePlan, Readout, DEFAULT_PATCH,
    DEFAULT_SIDE,
};
use fpt_core::metrics::{parse_metrics_csv, EvalReport, DEFAULT_THRESHOLD};
use fpt_core::plot::{svg_line_chart, Series};
use fpt_core::pretrain::{pretrain_on_text, PretrainConfig};
use fpt_core::tailsim::{
    check_contraction, forgetting_test, hill_tail_index, kesten_experiment, trajectory, trajectory_csv, ADist,
    BDist, KestenReport, RecurrenceSpec, DEFAULT_BURN_IN, DEFAULT_TAIL_TOLERANCE,
};
use fpt_core::transformer::TransformerConfig;
use fpt_core::Error;

use crate::settings::{usage, write, CliResult, Settings};
use crate::{EncryptArgs, EvaluateArgs, FinetuneArgs, ModelArgs, PretrainArgs, ReproduceArgs, TailArgs};

const BUILTIN_CORPUS_CHARS: usize = 100_000;

fn model_config(s: &mut Settings, a: &ModelArgs, base: TransformerConfig) -> CliResult<TransformerConfig> {
    Ok(TransformerConfig {
        embed_dim: s.value("embed-dim", a.embed_dim, base.embed_dim)?,
        n_layers: s.value("layers", a.layers, base.n_layers)?,
        n_heads: s.value("heads", a.heads, base.n_heads)?,
        context_len: s.value("context-len", a.context_len, base.context_len)?,
        ..base
    })
}

fn model_flags_given(a: &ModelArgs) -> bool {
    a.embed_dim.is_some() || a.layers.is_some() || a.heads.is_some() || a.context_len.is_some()
}

fn load_dataset(path: &Path, side: usize) -> CliResult<LabeledImageDataset> {
    let loaded = load_image_dir(path, LoadOptions::new(side))?;
    for (file, why) in &loaded.skipped {
        eprintln!("warning: skipped {}: {why}", file.display());
    }
    Ok(loaded.dataset)
}

fn check_synthetic(kind: &str) -> CliResult<()> {
    if kind == "bars" {
        Ok(())
    } else {
        Err(usage(format!("unknown synthetic dataset {kind:?} (available: bars)")))
    }
}

fn patterns(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect()
}

/// Write the evaluation CSVs and the ROC and PR plots.
fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    write(&out.join("metrics.csv"), report.metrics_csv())?;
    write(&out.join("roc.csv"), report.roc_csv())?;
    write(&out.join("pr.csv"), report.pr_csv())?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    write(&out.join("roc.svg"), report.roc_svg())?;
    write(&out.join("pr.svg"), report.pr_svg())?;
    println!(
        "auroc {:.4}  average_precision {:.4}  accuracy {:.4}  (n = {})",
        report.auroc,
        report.average_precision,
        report.confusion.accuracy(),
        report.n_samples
    );
    Ok(())
}

pub fn pretrain(a: PretrainArgs, mut s: Settings) -> CliResult<()> {
    let corpus: String = s
        .optional("corpus", a.corpus)?
        .ok_or_else(|| usage("--corpus is required (a text file, or `builtin`)"))?;
    let defaults = PretrainConfig::new("");
    let mut config = PretrainConfig {
        corpus: PathBuf::from(&corpus),
        steps: s.value("steps", a.steps, defaults.steps)?,
        batch_size: s.value("batch-size", a.batch_size, defaults.batch_size)?,
        learning_rate: s.value("lr", a.lr, defaults.learning_rate)?,
        log_interval: s.value("log-interval", a.log_interval, defaults.log_interval)?,
        seed: s.seed,
        output: None,
        model: defaults.model,
    };
    config.model = model_config(&mut s, &a.model, defaults.model)?;
    s.finish()?;

    let text = if corpus == "builtin" {
        builtin_corpus(BUILTIN_CORPUS_CHARS, s.seed)
    } else {
        std::fs::read_to_string(&corpus).map_err(|e| Error::Io {
            path: corpus.clone().into(),
            source: e,
        })?
    };
    let out = pretrain_on_text(&text, &config)?;
    let dir = s.out.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    out.checkpoint.save(dir.join("lm.fptk"))?;
    write(&dir.join("loss.csv"), out.curve.to_csv())?;
    let pts: Vec<(f64, f64)> = out.curve.points.iter().map(|p| (p.step as f64, p.loss)).collect();
    write(
        &dir.join("loss.svg"),
        svg_line_chart("Pretraining loss", "step", "cross-entropy", &[Series::new("train", pts)], None),
    )?;
    s.record("vocab-size", out.vocab.len());
    s.record("corpus-chars", text.chars().count());
    match out.curve.points.last() {
        Some(p) => println!("step {} loss {:.4}", p.step, p.loss),
        None => println!("no steps run"),
    }
    s.write_manifest(&dir, "pretrain")
}

pub fn finetune(a: FinetuneArgs, mut s: Settings) -> CliResult<()> {
    let seed = s.seed;
    let checkpoint = s.path("checkpoint", a.checkpoint)?;
    let random_core = s.switch("random-core", a.random_core)?;
    let side = s.value("side", a.side, DEFAULT_SIDE)?;
    let patch = s.value("patch", a.patch, DEFAULT_PATCH)?;
    let readout: String = s.value("readout", a.readout, Readout::default().as_str().to_string())?;
    let readout: Readout = readout.parse().map_err(|e: Error| usage(e.to_string()))?;

    let mut model = match (checkpoint, random_core) {
        (Some(_), true) => return Err(usage("--checkpoint and --random-core are exclusive")),
        (None, false) => return Err(usage("give --checkpoint PATH or --random-core")),
        (Some(path), false) => {
            if model_flags_given(&a.model) {
                return Err(usage("model shape flags only apply with --random-core"));
            }
            let ckpt = Checkpoint::<f32>::load(&path)?;
            if ckpt.meta.get("kind").map(String::as_str) == Some("fpt-classifier") {
                ClassifierModel::from_checkpoint(&ckpt)?
            } else {
                ClassifierModel::from_pretrained(&ckpt, side, patch, seed)?
            }
        }
        (None, true) => {
            let config = model_config(&mut s, &a.model, TransformerConfig::desk(1))?;
            ClassifierModel::random(config, side, patch, seed)?
        }
    };
    model.readout = readout;

    let data = s.path("data", a.data)?;
    let synthetic: Option<String> = s.optional("synthetic", a.synthetic)?;
    let (train, test) = match (data, synthetic) {
        (Some(_), Some(_)) => return Err(usage("--data and --synthetic are exclusive")),
        (None, None) => return Err(usage("give --data DIR or --synthetic bars")),
        (None, Some(kind)) => {
            check_synthetic(&kind)?;
            let n_train = s.value("train-per-class", a.train_per_class, 1000)?;
            let n_test = s.value("test-per-class", a.test_per_class, 200)?;
            let noise = s.value("noise", a.noise, 0.1)?;
            synth_train_test(n_train, n_test, model.side, noise, seed)?
        }
        (Some(dir), None) => {
            let all = load_dataset(&dir, model.side)?;
            match s.path("test-data", a.test_data)? {
                Some(test_dir) => (all, load_dataset(&test_dir, model.side)?),
                None => {
                    let f = s.value("train-fraction", a.train_fraction, 0.8)?;
                    split(&all, &SplitSpec::new(f, seed))?
                }
            }
        }
    };

    let defaults = FinetuneConfig::default();
    let config = FinetuneConfig {
        epochs: s.value("epochs", a.epochs, defaults.epochs)?,
        batch_size: s.value("batch-size", a.batch_size, defaults.batch_size)?,
        learning_rate: s.value("lr", a.lr, defaults.learning_rate)?,
        eval_every: s.value("eval-every", a.eval_every, defaults.eval_every)?,
        optimizer: s
            .value("optimizer", a.optimizer, defaults.optimizer.name().to_string())?
            .parse()
            .map_err(|e: Error| usage(e.to_string()))?,
        seed,
    };
    let freeze: String = s.value("freeze", a.freeze, "default".to_string())?;
    let mut plan = match freeze.as_str() {
        "default" => FreezePlan::default(),
        "none" => FreezePlan::full(),
        globs => FreezePlan {
            trainable: patterns(globs),
            frozen: Vec::new(),
        },
    };
    if let Some(frozen) = s.optional::<String>("frozen", a.frozen)? {
        plan.frozen = patterns(&frozen);
    }
    let early_stop: Option<f64> = s.optional("early-stop-acc", a.early_stop_acc)?;
    let threshold = s.value("threshold", a.threshold, DEFAULT_THRESHOLD)?;
    s.finish()?;

    let out = finetune_with(model, &train, &test, &config, &plan, |_, r| {
        println!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  test_loss {:.4}  test_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        );
        Ok(early_stop.is_some_and(|t| r.test_acc >= t))
    })?;

    let dir = s.out.clone();
    write(&dir.join("classifier.fptk"), out.model.to_checkpoint().to_bytes()?)?;
    write(&dir.join("curves.csv"), out.curves.to_csv())?;
    let series = |f: fn(&fpt_core::fpt::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        out.curves.records.iter().map(|r| (r.epoch as f64, f(r))).collect()
    };
    write(
        &dir.join("accuracy.svg"),
        svg_line_chart(
            "Train and test accuracy",
            "epoch",
            "accuracy",
            &[
                Series::new("train", series(|r| r.train_acc)),
                Series::new("test", series(|r| r.test_acc)),
            ],
            None,
        ),
    )?;
    write(
        &dir.join("loss.svg"),
        svg_line_chart(
            "Train and test loss",
            "epoch",
            "cross-entropy",
            &[
                Series::new("train", series(|r| r.train_loss)),
                Series::new("test", series(|r| r.test_loss)),
            ],
            None,
        ),
    )?;
    let mut freeze_csv = String::from("parameter,status\n");
    for n in &out.freeze.trainable {
        let _ = writeln!(freeze_csv, "{n},trainable");
    }
    for n in &out.freeze.frozen {
        let _ = writeln!(freeze_csv, "{n},frozen");
    }
    write(&dir.join("freeze.csv"), freeze_csv)?;
    s.record("freeze.trainable-scalars", out.freeze.trainable_count);
    s.record("freeze.total-scalars", out.freeze.total_count);
    s.record("epochs-run", out.curves.records.last().map_or(0, |r| r.epoch));

    let samples = score_dataset(&out.model, &test)?;
    write_report(&dir, &EvalReport::compute(&samples, threshold)?)?;
    s.write_manifest(&dir, "finetune")
}

pub fn evaluate(a: EvaluateArgs, mut s: Settings) -> CliResult<()> {
    let path = s
        .path("checkpoint", a.checkpoint)?
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let data = s.path("data", a.data)?;
    let synthetic: Option<String> = s.optional("synthetic", a.synthetic)?;
    let threshold = s.value("threshold", a.threshold, DEFAULT_THRESHOLD)?;
    let model = ClassifierModel::from_checkpoint(&Checkpoint::<f32>::load(&path)?)?;
    let test = match (data, synthetic) {
        (Some(_), Some(_)) => return Err(usage("--data and --synthetic are exclusive")),
        (None, None) => return Err(usage("give --data DIR or --synthetic bars")),
        (Some(dir), None) => load_dataset(&dir, model.side)?,
        (None, Some(kind)) => {
            check_synthetic(&kind)?;
            let n_train = s.value("train-per-class", a.train_per_class, 1000)?;
            let n_test = s.value("test-per-class", a.test_per_class, 200)?;
            let noise = s.value("noise", a.noise, 0.1)?;
            synth_train_test(n_train, n_test, model.side, noise, s.seed)?.1
        }
    };
    s.finish()?;
    let samples = score_dataset(&model, &test)?;
    let report = EvalReport::compute(&samples, threshold)?;
    let dir = s.out.clone();
    write_report(&dir, &report)?;
    s.write_manifest(&dir, "evaluate")
}

pub fn encrypt_dataset(a: EncryptArgs, mut s: Settings) -> CliResult<()> {
    let data = s.path("data", a.data)?.ok_or_else(|| usage("--data is required"))?;
    let key = s.path("key", a.key)?;
    let gen_key = s.switch("gen-key", a.gen_key)?;
    let params = match (key, gen_key) {
        (Some(_), true) => return Err(usage("--key and --gen-key are exclusive")),
        (None, false) => return Err(usage("missing key: give --key FILE or --gen-key")),
        (Some(path), false) => ChebyshevParams::load(&path)?,
        (None, true) => keygen(s.seed),
    };
    let r = s.value("r", a.r, ephemeral_degree(s.seed))?;
    let mode: String = s.value("mode", a.mode, "byte".to_string())?;
    let mode: CipherMode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
    let side = s.value("side", a.side, DEFAULT_SIDE)?;
    s.finish()?;

    let plain = load_dataset(&data, side)?;
    if mode == CipherMode::Float {
        s.record("float-input", "8-bit pixels scaled to [0, 1] before encryption");
    }
    let (cts, _) = encrypt_images(&plain, &params.public, r, mode)?;
    let dir = s.out.clone();
    let mut manifest = String::from("filename,label,source\n");
    for (ct, item) in cts.iter().zip(&plain.items) {
        let rel = Path::new(&item.source).with_extension("fptc");
        let rel = rel.to_string_lossy().replace('\\', "/");
        write(&dir.join(&rel), ct.to_bytes())?;
        let _ = writeln!(manifest, "{rel},{},{}", item.label, item.source);
    }
    write(&dir.join("manifest.csv"), manifest)?;
    write(&dir.join("key.txt"), params.to_key_file())?;
    println!("encrypted {} images ({mode:?} mode, r = {r})", cts.len());
    s.write_manifest(&dir, "encrypt-dataset")
}

fn a_distribution(a: &TailArgs, s: &mut Settings) -> CliResult<ADist> {
    if let Some(c) = s.optional("a-const", a.a_const)? {
        return Ok(ADist::Const(c));
    }
    let kind: String = s.value("a-dist", a.a_dist.clone(), "uniform".to_string())?;
    Ok(match kind.as_str() {
        "uniform" => ADist::Uniform {
            lo: s.value("a-lo", a.a_lo, 0.0)?,
            hi: s.value("a-hi", a.a_hi, 2.0)?,
        },
        "lognormal" => ADist::LogNormal {
            mu: s.value("a-mu", a.a_mu, -0.5)?,
            sigma: s.value("a-sigma", a.a_sigma, 1.0)?,
        },
        "two-point" => ADist::TwoPoint {
            lo: s.value("a-lo", a.a_lo, 0.5)?,
            hi: s.value("a-hi", a.a_hi, 1.5)?,
            p_lo: s.value("a-p", a.a_p, 0.5)?,
        },
        "const" => ADist::Const(s.value("a-lo", a.a_lo, 0.5)?),
        other => return Err(usage(format!("unknown --a-dist {other:?} (uniform|lognormal|two-point|const)"))),
    })
}

fn b_distribution(a: &TailArgs, s: &mut Settings) -> CliResult<BDist> {
    let kind: String = s.value("b-dist", a.b_dist.clone(), "const".to_string())?;
    Ok(match kind.as_str() {
        "const" => BDist::Const(s.value("b-const", a.b_const, 1.0)?),
        "uniform" => BDist::Uniform {
            lo: s.value("b-lo", a.b_lo, 0.0)?,
            hi: s.value("b-hi", a.b_hi, 1.0)?,
        },
        "gaussian" => BDist::Gaussian {
            mean: s.value("b-mean", a.b_mean, 0.0)?,
            std: s.value("b-std", a.b_std, 1.0)?,
        },
        other => return Err(usage(format!("unknown --b-dist {other:?} (const|uniform|gaussian)"))),
    })
}

pub fn simulate_tail(a: TailArgs, mut s: Settings) -> CliResult<()> {
    let a_dist = a_distribution(&a, &mut s)?;
    let b_dist = b_distribution(&a, &mut s)?;
    let samples = s.value("samples", a.samples, 1_000_000usize)?;
    let burn_in = s.value("burn-in", a.burn_in, DEFAULT_BURN_IN)?;
    let k = s.value("k", a.k, (samples / 100).max(10))?;
    let x0 = s.value("x0", a.x0, 0.0)?;
    let allow_unstable = s.switch("allow-unstable", a.allow_unstable)?;
    let trajectory_len = s.value("trajectory-len", a.trajectory_len, 1000usize)?;
    s.finish()?;
    if samples == 0 {
        return Err(usage("--samples must be positive"));
    }

    let spec = RecurrenceSpec {
        a: a_dist,
        b: b_dist,
        x0,
        horizon: burn_in + samples,
        burn_in,
        seed: s.seed,
    };
    let contraction = check_contraction(&spec, 100_000)?;
    let stable = contraction.is_stable();
    if !stable && !allow_unstable {
        return Err(Error::Domain(format!(
            "unstable recurrence: E log|A| = {:.4} is not negative (pass --allow-unstable to simulate anyway)",
            contraction.mean_log_a
        ))
        .into());
    }

    let dir = s.out.clone();
    let path = trajectory(&spec)?;
    let kept = &path[burn_in..];
    write(
        &dir.join("trajectory.csv"),
        trajectory_csv(&kept[..trajectory_len.min(kept.len())], burn_in + 1),
    )?;
    let report = if stable {
        kesten_experiment(&spec, k)?
    } else {
        let abs: Vec<f64> = kept.iter().map(|v| v.abs()).collect();
        KestenReport {
            estimate: hill_tail_index(&abs, k)?,
            contraction,
            target: None,
            tolerance: DEFAULT_TAIL_TOLERANCE,
        }
    };
    write(&dir.join("tail.csv"), report.to_csv())?;

    if stable {
        let short = RecurrenceSpec {
            horizon: 200,
            burn_in: 0,
            ..spec
        };
        let f = forgetting_test(&short, x0, x0 + 1.0)?;
        let mut csv = String::from("t,gap,predicted\n");
        for (i, (g, p)) in f.gaps.iter().zip(&f.predicted).enumerate() {
            let _ = writeln!(csv, "{},{g},{p}", i + 1);
        }
        write(&dir.join("forgetting.csv"), csv)?;
    }
    print!("{}", report.to_csv());
    s.write_manifest(&dir, "simulate-tail")
}

#[derive(Debug, Clone, Copy, Default)]
struct Scores {
    accuracy: f64,
    auroc: f64,
    average_precision: f64,
}

fn read_scores(metrics_csv: &Path) -> CliResult<Scores> {
    let text = std::fs::read_to_string(metrics_csv).map_err(|e| Error::Io {
        path: metrics_csv.to_path_buf(),
        source: e,
    })?;
    let mut out = Scores::default();
    for (k, v) in parse_metrics_csv(&text)? {
        match k.as_str() {
            "accuracy" => out.accuracy = v,
            "auroc" => out.auroc = v,
            "average_precision" => out.average_precision = v,
            _ => {}
        }
    }
    Ok(out)
}

/// Settings for one pipeline stage, written under `root/name`.
fn stage(root: &Path, name: &str, seed: u64, pairs: &[(&str, String)]) -> CliResult<Settings> {
    let mut map: BTreeMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    map.insert("seed".into(), seed.to_string());
    map.insert("out".into(), root.join(name).to_string_lossy().into_owned());
    let mut s = Settings::from_map(map);
    s.set_common(name, None, None)?;
    Ok(s)
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn reproduce(a: ReproduceArgs, mut s: Settings) -> CliResult<()> {
    let seed = s.seed;
    let corpus: String = s.value("corpus", a.corpus, "builtin".to_string())?;
    let steps = s.value("pretrain-steps", a.pretrain_steps, 300usize)?;
    let epochs = s.value("epochs", a.epochs, 10usize)?;
    let enc_epochs = s.value("encrypted-epochs", a.encrypted_epochs, 20usize)?;
    let n_train = s.value("train-per-class", a.train_per_class, 1000usize)?;
    let n_test = s.value("test-per-class", a.test_per_class, 200usize)?;
    let noise = s.value("noise", a.noise, 0.1)?;
    let base = TransformerConfig {
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        context_len: 32,
        ..TransformerConfig::desk(1)
    };
    let model = model_config(&mut s, &a.model, base)?;
    s.finish()?;
    let root = s.out.clone();

    println!("== pretrain");
    pretrain(
        PretrainArgs::default(),
        stage(
            &root,
            "pretrain",
            seed,
            &[
                ("corpus", corpus),
                ("steps", steps.to_string()),
                ("log-interval", "10".into()),
                ("embed-dim", model.embed_dim.to_string()),
                ("layers", model.n_layers.to_string()),
                ("heads", model.n_heads.to_string()),
                ("context-len", model.context_len.to_string()),
            ],
        )?,
    )?;

    let plain = root.join("data/plain");
    let (train, test) = synth_train_test(n_train, n_test, DEFAULT_SIDE, noise, seed)?;
    train.save_dir(&plain.join("train"))?;
    test.save_dir(&plain.join("test"))?;

    let enc = root.join("data/encrypted");
    let r = ephemeral_degree(seed);
    for (split, key) in [("train", None), ("test", Some(enc.join("train/key.txt")))] {
        println!("== encrypt {split}");
        let mut pairs = vec![
            ("data", display(&plain.join(split))),
            ("r", r.to_string()),
            ("mode", "byte".to_string()),
        ];
        match key {
            Some(k) => pairs.push(("key", display(&k))),
            None => pairs.push(("gen-key", "true".into())),
        }
        encrypt_dataset(
            EncryptArgs::default(),
            stage(&root, &format!("data/encrypted/{split}"), seed, &pairs)?,
        )?;
    }

    let ckpt = display(&root.join("pretrain/lm.fptk"));
    let mut summary = String::from("variant,epochs,final_test_acc,auroc,average_precision\n");
    for (variant, data, n_epochs) in [("plain", &plain, epochs), ("encrypted", &enc, enc_epochs)] {
        println!("== finetune {variant}");
        let ft = format!("finetune-{variant}");
        finetune(
            FinetuneArgs::default(),
            stage(
                &root,
                &ft,
                seed,
                &[
                    ("checkpoint", ckpt.clone()),
                    ("data", display(&data.join("train"))),
                    ("test-data", display(&data.join("test"))),
                    ("epochs", n_epochs.to_string()),
                ],
            )?,
        )?;
        println!("== evaluate {variant}");
        let ev = format!("evaluate-{variant}");
        evaluate(
            EvaluateArgs::default(),
            stage(
                &root,
                &ev,
                seed,
                &[
                    ("checkpoint", display(&root.join(&ft).join("classifier.fptk"))),
                    ("data", display(&data.join("test"))),
                ],
            )?,
        )?;
        let sc = read_scores(&root.join(&ev).join("metrics.csv"))?;
        let _ = writeln!(
            summary,
            "{variant},{n_epochs},{},{},{}",
            sc.accuracy, sc.auroc, sc.average_precision
        );
    }
    write(&root.join("summary.csv"), &summary)?;
    print!("{summary}");
    s.write_manifest(&root, "reproduce")
}
