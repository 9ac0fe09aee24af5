use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;
mod staging;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] getam::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "getam",
    version,
    about = "Transformer attention attribution and single-stage weakly-supervised segmentation on synthetic shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Shared {
    /// Plain-text `key = value` settings; flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct DatasetArg {
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct CheckpointArg {
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct AttributionArgs {
    /// getam, gradcam, cam-add or cam-ignore.
    #[arg(long)]
    pub method: Option<String>,
    /// sum, ewmul or matmul.
    #[arg(long)]
    pub fusion: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct CompletionArgs {
    /// Per-class activation quantile for mining in non-salient regions.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Background exponent.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub no_pamr: bool,
    #[arg(long)]
    pub pamr_iters: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub sal_weight: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Share of images holding an object with withheld saliency.
        #[arg(long)]
        nonsalient_fraction: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train with the two-phase schedule; writes a checkpoint and metrics CSV.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        completion: CompletionArgs,
    },
    /// Write per-class attribution maps (GTT1 and PNG).
    Attribute {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        attribution: AttributionArgs,
        /// Attribute every class, not only the image-level labels.
        #[arg(long)]
        all_classes: bool,
    },
    /// Generate completed pseudo labels.
    PseudoLabel {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        attribution: AttributionArgs,
        #[command(flatten)]
        completion: CompletionArgs,
        /// Also write labels before and after high-activation mining.
        #[arg(long)]
        dump_intermediate: bool,
    },
    /// Score label PNGs against the dataset masks.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        dataset: DatasetArg,
        /// Directory of `{image_id}.png` label maps.
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        /// Count unknown (255) pixels as misses instead of ignoring them.
        #[arg(long)]
        count_unknown_as_error: bool,
    },
    /// Render overlays of attribution maps and the fusion histogram.
    Viz {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        dataset: DatasetArg,
        /// Output directory of `attribute`.
        #[arg(long, value_name = "DIR")]
        maps: Option<PathBuf>,
    },
    /// Finite-difference checks of the toy model's gradients.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
