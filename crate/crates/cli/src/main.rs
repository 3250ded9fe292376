//! `sketch-anchor`: data generation, training and evaluation driver.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketch_anchor::trainer::Ablation;

#[derive(Parser, Debug)]
#[command(name = "sketch-anchor", version, about = "Zero-shot sketch-based image retrieval with semantic anchors")]
pub struct Cli {
    /// TOML file with experiment defaults; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, env = "SKETCH_ANCHOR_OUT", default_value = "runs")]
    pub out: PathBuf,

    /// Print per-evaluation progress.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic two-domain dataset with word vectors and a split.
    GenSynthetic(GenArgs),
    /// Compute seen-class word and visual anchors for a dataset.
    ComputeAnchors(DataArgs),
    /// Train one model; writes a checkpoint, the training curve and a test report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the unseen test classes.
    Eval(EvalArgs),
    /// Train all six ablation rows with a shared seed.
    Ablate(TrainArgs),
    /// Train on the N closest or farthest images per class to the visual anchor.
    SelectImages(SelectArgs),
    /// Dump the learning-rate schedule.
    LrCurve(LrArgs),
    /// Evaluate on a gallery with seen-class images injected.
    GzssEval(GzssArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory written by `gen-synthetic` (or the exporter). A
    /// synthetic dataset is generated in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub domain_gap: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of unseen (test) classes in the split.
    #[arg(long)]
    pub unseen: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Sketch,
    Image,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "sketch")]
    pub queries: DomainArg,
    #[arg(long, value_enum, default_value = "image")]
    pub gallery: DomainArg,
}

#[derive(Args, Debug, Clone)]
pub struct SelectArgs {
    #[command(flatten)]
    pub run: TrainArgs,
    /// Images kept per class; defaults to the sweep 200,100,50,10,5,1.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
}

#[derive(Args, Debug, Clone)]
pub struct LrArgs {
    /// Use the reference schedule (5e-6 to 1e-6 over 1500 iterations).
    #[arg(long, conflicts_with_all = ["lr", "min_lr"])]
    pub reference: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct GzssArgs {
    #[command(flatten)]
    pub run: TrainArgs,
    /// Evaluate this checkpoint instead of training a model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Share of each seen class's images injected into the gallery.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
}

/// A bad flag value or combination; mapped to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<sketch_anchor::Error>(), Some(sketch_anchor::Error::Config(_)))
    })
}
