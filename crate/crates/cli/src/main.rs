//! `icam` — command-line front end for the phantom attribution pipeline:
//! dataset generation, model training, evaluation, and the per-subject
//! analysis commands (translate / attribute / interpolate / embed).
//!
//! Every command exits 0 on success with all outputs under `--out`; failures
//! print a machine-readable `{"error": ..., "message": ...}` JSON object to
//! stderr and exit nonzero. The `ICAM_THREADS` environment variable bounds
//! worker parallelism.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use icam_core::attribution::{EmbedMethod, DEFAULT_FA_SAMPLES};
use icam_core::synthdata::Split;
use icam_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "icam",
    version,
    about = "Disentangled image translation: phenotype classification, regression, \
             and feature attribution on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with ground-truth difference maps.
    GenData {
        /// Run configuration (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the translation model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on the test split: accuracy, regression metrics,
    /// the NCC table against attribution baselines, the flip test, and
    /// FA–phenotype correlations.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attribute samples drawn per subject for the FA maps.
        #[arg(long, default_value_t = DEFAULT_FA_SAMPLES)]
        samples: usize,
        #[arg(long)]
        force: bool,
    },
    /// Translate a class-0/class-1 image pair in both directions and write
    /// the full bundle (reconstructions, translations, FA maps) as tensors
    /// and PNGs.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Mean/variance FA map for one image by sampling translations toward a
    /// target class.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        target_class: u8,
        #[arg(long, default_value_t = DEFAULT_FA_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Walk the attribute latent from image A to image B, writing per-step
    /// images, FA maps, and predictions.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Number of interpolation points including both endpoints.
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Project attribute latents of a dataset split to 2-d for plotting.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Tsne)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tsne,
    Pca,
}

impl From<MethodArg> for EmbedMethod {
    fn from(m: MethodArg) -> EmbedMethod {
        match m {
            MethodArg::Tsne => EmbedMethod::Tsne,
            MethodArg::Pca => EmbedMethod::Pca,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Honor ICAM_THREADS by capping the global worker pool before any parallel
/// work starts.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ICAM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("ICAM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("could not configure {threads} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { config, seed, out, force } => {
            commands::gen_data(config.as_deref(), seed, &out, force)
        }
        Command::Train { config, data, out, force } => {
            commands::train(config.as_deref(), &data, &out, force)
        }
        Command::Eval { config, checkpoint, data, out, samples, force } => {
            commands::eval(config.as_deref(), &checkpoint, &data, &out, samples, force)
        }
        Command::Translate { checkpoint, image_a, image_b, out, force } => {
            commands::translate(&checkpoint, &image_a, &image_b, &out, force)
        }
        Command::Attribute { checkpoint, image, target_class, samples, seed, out, force } => {
            commands::attribute(&checkpoint, &image, target_class, samples, seed, &out, force)
        }
        Command::Interpolate { checkpoint, image_a, image_b, steps, out, force } => {
            commands::interpolate_cmd(&checkpoint, &image_a, &image_b, steps, &out, force)
        }
        Command::Embed { checkpoint, data, method, split, seed, out, force } => {
            commands::embed(&checkpoint, &data, method.into(), split.into(), seed, &out, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
