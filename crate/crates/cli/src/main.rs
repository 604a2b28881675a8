//! `fpt`: pretraining, frozen-pretrained fine-tuning, image encryption,
//! evaluation and tail simulation from the command line.
//!
//! Exit codes: 0 success, 1 runtime or domain failure, 2 usage error.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use settings::{CliError, Settings};

#[derive(Parser, Debug)]
#[command(name = "fpt", version, about = "Frozen pretrained transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// Plain-text `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<String>,
}

/// Transformer shape flags.
#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct PretrainArgs {
    /// Text file to train on, or `builtin` for the bundled corpus.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Record the mean loss every N steps.
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Default, Clone)]
pub struct FinetuneArgs {
    /// Pretraining checkpoint supplying the frozen core.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Use a randomly initialised core instead of a checkpoint.
    #[arg(long)]
    pub random_core: bool,
    /// Dataset directory with `0/` and `1/` subdirectories.
    #[arg(long)]
    pub data: Option<String>,
    /// Separate test directory; otherwise `--data` is split.
    #[arg(long)]
    pub test_data: Option<String>,
    /// Generated dataset instead of `--data` (`bars`).
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Gaussian pixel noise for synthetic data.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `default`, `none` (train everything) or comma-separated globs of
    /// trainable parameters.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Comma-separated globs forced frozen.
    #[arg(long)]
    pub frozen: Option<String>,
    /// Sequence readout: `mean` or `last`.
    #[arg(long)]
    pub readout: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Stop once test accuracy reaches this value.
    #[arg(long)]
    pub early_stop_acc: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Default, Clone)]
pub struct EncryptArgs {
    #[arg(long)]
    pub data: Option<String>,
    /// Key file with `x` and `s`.
    #[arg(long)]
    pub key: Option<String>,
    /// Generate a key from the seed and write it to the output directory.
    #[arg(long)]
    pub gen_key: bool,
    /// Ephemeral degree shared by the whole dataset.
    #[arg(long)]
    pub r: Option<u64>,
    /// `byte` or `float`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct EvaluateArgs {
    /// Classifier checkpoint written by `finetune`.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TailArgs {
    /// Law of A: `uniform`, `lognormal`, `two-point` or `const`.
    #[arg(long)]
    pub a_dist: Option<String>,
    /// Shorthand for `--a-dist const` with this value.
    #[arg(long)]
    pub a_const: Option<f64>,
    #[arg(long)]
    pub a_lo: Option<f64>,
    #[arg(long)]
    pub a_hi: Option<f64>,
    #[arg(long)]
    pub a_mu: Option<f64>,
    #[arg(long)]
    pub a_sigma: Option<f64>,
    /// Probability of `a-lo` for the two-point law.
    #[arg(long)]
    pub a_p: Option<f64>,
    /// Law of B: `const`, `uniform` or `gaussian`.
    #[arg(long)]
    pub b_dist: Option<String>,
    #[arg(long)]
    pub b_const: Option<f64>,
    #[arg(long)]
    pub b_lo: Option<f64>,
    #[arg(long)]
    pub b_hi: Option<f64>,
    #[arg(long)]
    pub b_mean: Option<f64>,
    #[arg(long)]
    pub b_std: Option<f64>,
    /// Post burn-in samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Order statistics used by the Hill estimator.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub allow_unstable: bool,
    /// Rows written to trajectory.csv.
    #[arg(long)]
    pub trajectory_len: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub encrypted_epochs: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the character-level language model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: PretrainArgs,
    },
    /// Fine-tune a frozen core on a two-class image dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: FinetuneArgs,
    },
    /// Encrypt an image directory with the Chebyshev cipher.
    EncryptDataset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EncryptArgs,
    },
    /// Score a dataset with a trained classifier.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvaluateArgs,
    },
    /// Simulate X_t = A_t X_(t-1) + B_t and estimate its tail index.
    SimulateTail {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TailArgs,
    },
    /// Run the whole pipeline at desk scale.
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: ReproduceArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::EncryptDataset { .. } => "encrypt-dataset",
            Command::Evaluate { .. } => "evaluate",
            Command::SimulateTail { .. } => "simulate-tail",
            Command::Reproduce { .. } => "reproduce",
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let name = command.name();
    let (common, run): (Common, Box<dyn FnOnce(Settings) -> Result<(), CliError>>) = match command {
        Command::Pretrain { common, args } => (common, Box::new(move |s| commands::pretrain(args, s))),
        Command::Finetune { common, args } => (common, Box::new(move |s| commands::finetune(args, s))),
        Command::EncryptDataset { common, args } => {
            (common, Box::new(move |s| commands::encrypt_dataset(args, s)))
        }
        Command::Evaluate { common, args } => (common, Box::new(move |s| commands::evaluate(args, s))),
        Command::SimulateTail { common, args } => {
            (common, Box::new(move |s| commands::simulate_tail(args, s)))
        }
        Command::Reproduce { common, args } => (common, Box::new(move |s| commands::reproduce(args, s))),
    };
    let mut settings = Settings::from_file(common.config.as_deref())?;
    settings.set_common(name, common.seed, common.out)?;
    run(settings)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try 'fpt {name} --help'.");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
