//! `sateco`: synthetic data generation, staged training, inference,
//! evaluation, ablation and gradient checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
//! error, 3 missing prerequisite, 4 failed check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;
mod settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

/// Exit code of an error, from the first classified cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| {
            if let Some(c) = e.downcast_ref::<CliError>() {
                return Some(c.code());
            }
            match e.downcast_ref::<sateco::Error>()? {
                sateco::Error::Config(_) => Some(2),
                sateco::Error::MissingStage { .. } => Some(3),
                _ => None,
            }
        })
        .unwrap_or(1)
}

#[derive(Debug, Parser)]
#[command(name = "sateco", version, about = "Toy-scale latent-diffusion video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Layered settings shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct SettingArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset: none or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Extra `key=value` setting; repeatable, overrides the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic ground-truth clips and their x4 bicubic degradations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        clips: usize,
        /// Ground-truth frame size.
        #[arg(long, default_value = "32x32")]
        size: String,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// translate, rotate, bounce or all (cycled).
        #[arg(long, default_value = "all")]
        motion: String,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage and write its checkpoint, log and manifest.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "SATECO_CKPT_DIR")]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// A, B, C or D; read at stage 0 only.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        settings: SettingArgs,
    },
    /// Super-resolve one low-resolution clip with a fully trained model.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, env = "SATECO_CKPT_DIR")]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the upscaled and decoded clips to `intermediates/` beside the output.
        #[arg(long)]
        intermediates: bool,
    },
    /// Score predicted clips against ground truth, pairing files by clip name.
    Eval {
        /// Predictions; `*_gt.svt` files here are ignored.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth; `*_lr.svt` files here are ignored.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "psnr,ssim,tc")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        /// Bicubic-upsample predictions by this factor before scoring.
        #[arg(long)]
        upsample: Option<usize>,
    },
    /// Train and evaluate one guidance variant, or the whole ablation.
    Ablate {
        /// A, B, C, D or all.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "SATECO_CKPT_DIR")]
        ckpt: PathBuf,
        /// Fraction of clips held out for evaluation (the last ones by name).
        #[arg(long, default_value_t = 0.25)]
        held_out: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        settings: SettingArgs,
    },
    /// Central-difference gradient checks of ops and modules.
    Gradcheck {
        /// Case name or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Number of seeded instances per case.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Write the report and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the run recorded in a manifest.
    Rerun { manifest: PathBuf },
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse_from(std::iter::once("sateco".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::dispatch(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
