mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Train and evaluate deepfake detectors over precomputed embeddings.
#[derive(Parser)]
#[command(name = "fiona", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality train/eval set.
    Synth(SynthArgs),
    /// Train a single-branch classifier (fcn or cnn).
    Train(TrainArgs),
    /// Train a two-branch fusion classifier (concat or fiona).
    TrainFusion(FusionArgs),
    /// Score a dataset with a saved checkpoint.
    Eval(EvalArgs),
    /// Compute the EER of a score file.
    Eer(EerArgs),
    /// Run a grid of fusion trainings and tabulate the EERs.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Shared {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Training {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Fraction of the training set held out for early stopping.
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct FusionOptions {
    /// Weight of the CKA alignment term (fiona only).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    projection_dim: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Utterances per class in each of the train and eval portions.
    #[arg(long)]
    n: Option<usize>,
    /// Embedding widths of the two modalities, e.g. `32,32`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Complementarity angle in radians.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    nuisance: Option<f64>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct TrainArgs {
    /// `fcn` or `cnn`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[command(flatten)]
    training: Training,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct FusionArgs {
    /// `concat` or `fiona`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    train_a: Option<PathBuf>,
    #[arg(long)]
    train_b: Option<PathBuf>,
    #[arg(long)]
    eval_a: Option<PathBuf>,
    #[arg(long)]
    eval_b: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fusion: FusionOptions,
    #[command(flatten)]
    training: Training,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eval_a: PathBuf,
    /// Second modality, required for fusion checkpoints.
    #[arg(long)]
    eval_b: Option<PathBuf>,
    /// Score file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EerArgs {
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory holding `<name>_train.femb` and `<name>_eval.femb`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated modality pairs such as `a+b,a+c`.
    #[arg(long, value_delimiter = ',')]
    pairs: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Grid cells trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fusion: FusionOptions,
    #[command(flatten)]
    training: Training,
    #[command(flatten)]
    shared: Shared,
}

impl Shared {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.seed = self.seed;
    }
}

impl Training {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        t.epochs = self.epochs;
        t.learning_rate = self.lr;
        t.batch_size = self.batch;
        t.patience = self.patience;
        t.val_fraction = self.val_fraction;
        cfg.model.dropout = self.dropout;
    }
}

impl FusionOptions {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.loss.lambda = self.lambda;
        cfg.loss.label_smoothing = self.label_smoothing;
        cfg.model.projection_dim = self.projection_dim;
    }
}

fn run(command: Command) -> fiona_core::Result<()> {
    let mut flags = RunConfig::default();
    match command {
        Command::Synth(a) => {
            a.shared.apply(&mut flags);
            let s = &mut flags.synth;
            s.n_per_class = a.n;
            s.dims = match a.dims.as_deref() {
                None => None,
                Some(&[da, db]) => Some([da, db]),
                Some(other) => {
                    return Err(fiona_core::Error::Config(format!("--dims takes two widths, got {other:?}")))
                }
            };
            s.theta = a.theta;
            s.sigma = a.sigma;
            s.separation = a.separation;
            s.nuisance = a.nuisance;
            let cfg = RunConfig::resolve(a.shared.config.as_deref(), &flags)?;
            commands::synth(&cfg, &a.out)
        }
        Command::Train(a) => {
            a.shared.apply(&mut flags);
            a.training.apply(&mut flags);
            flags.loss.label_smoothing = a.label_smoothing;
            flags.data.arch = a.arch;
            flags.data.train = a.train;
            flags.data.eval = a.eval;
            let cfg = RunConfig::resolve(a.shared.config.as_deref(), &flags)?;
            commands::train_single(&cfg, &a.out)
        }
        Command::TrainFusion(a) => {
            a.shared.apply(&mut flags);
            a.training.apply(&mut flags);
            a.fusion.apply(&mut flags);
            flags.data.arch = a.mode;
            flags.data.train_a = a.train_a;
            flags.data.train_b = a.train_b;
            flags.data.eval_a = a.eval_a;
            flags.data.eval_b = a.eval_b;
            let cfg = RunConfig::resolve(a.shared.config.as_deref(), &flags)?;
            commands::train_fusion(&cfg, &a.out, a.fusion.lambda.is_some())
        }
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.eval_a, a.eval_b.as_deref(), &a.out),
        Command::Eer(a) => commands::eer(&a.scores),
        Command::Sweep(a) => {
            a.shared.apply(&mut flags);
            a.training.apply(&mut flags);
            a.fusion.apply(&mut flags);
            let s = &mut flags.sweep;
            s.data_dir = a.data;
            s.pairs = a.pairs;
            s.modes = a.modes;
            s.seeds = a.seeds;
            s.jobs = a.jobs;
            let cfg = RunConfig::resolve(a.shared.config.as_deref(), &flags)?;
            sweep::sweep(&cfg, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
