//! Depth-completion command line: train, evaluate, predict, verify
//! gradients, and benchmark. Configuration comes from a flat
//! `key = value` file plus flags whose names mirror the keys; the
//! resolved config is echoed beside every run's outputs. Log verbosity
//! follows the `RUST_LOG` environment variable (default `info`).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 verification failure (bad gradients or non-finite values).

mod bench;
mod config;
mod data;
mod eval;
mod gradcheck;
mod predict;
mod train;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use fusenet::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fusenet",
    about = "Depth completion with joint 2D-3D fuse blocks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (two-phase schedule, checkpointed every epoch)
    Train(CommonArgs),
    /// Evaluate a checkpoint: per-frame and pooled metrics
    Eval(CommonArgs),
    /// Complete depth maps and save them as 16-bit images
    Predict(CommonArgs),
    /// Verify every operation's gradients by finite differences
    Gradcheck(CommonArgs),
    /// Time KD-tree, KNN, continuous convolution, and a fuse block
    Bench(CommonArgs),
}

/// Flags mirror config-file keys exactly (`--sample-budget` sets
/// `sample_budget`); any flag given on the command line overrides the
/// file.
#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file applied before the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full-scale preset (C=64, N=12, 1216x352) instead of desk scale
    #[arg(long)]
    paper_scale: bool,
    /// Force synthetic data even when a dataset is configured
    #[arg(long)]
    synthetic: bool,
    /// Also write colorized depth visualizations (predict)
    #[arg(long)]
    viz: bool,

    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    synthetic_frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sample_budget: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated subset of s1,s2,cont
    #[arg(long)]
    branches: Option<String>,
    #[arg(long)]
    epochs_l2: Option<usize>,
    #[arg(long)]
    lr_l2: Option<f64>,
    /// Comma-separated epoch milestones for the first phase
    #[arg(long)]
    milestones_l2: Option<String>,
    #[arg(long)]
    epochs_fine: Option<usize>,
    #[arg(long)]
    lr_fine: Option<f64>,
    /// Comma-separated epoch milestones for the fine-tune phase
    #[arg(long)]
    milestones_fine: Option<String>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_height: Option<usize>,
    #[arg(long)]
    crop_width: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> fusenet::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if self.paper_scale {
            cfg.apply_paper_scale();
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.synthetic {
            cfg.synthetic = true;
        }
        if self.viz {
            cfg.viz = true;
        }
        if let Some(v) = self.synthetic_frames {
            cfg.synthetic_frames = v;
        }
        if let Some(v) = self.height {
            cfg.height = v;
        }
        if let Some(v) = self.width {
            cfg.width = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.blocks {
            cfg.blocks = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.sample_budget {
            cfg.sample_budget = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = &self.branches {
            cfg.set("branches", v)?;
        }
        if let Some(v) = self.epochs_l2 {
            cfg.epochs_l2 = v;
        }
        if let Some(v) = self.lr_l2 {
            cfg.lr_l2 = v;
        }
        if let Some(v) = &self.milestones_l2 {
            cfg.set("milestones_l2", v)?;
        }
        if let Some(v) = self.epochs_fine {
            cfg.epochs_fine = v;
        }
        if let Some(v) = self.lr_fine {
            cfg.lr_fine = v;
        }
        if let Some(v) = &self.milestones_fine {
            cfg.set("milestones_fine", v)?;
        }
        if let Some(v) = self.lr_decay {
            cfg.lr_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.crop_height {
            cfg.crop_height = v;
        }
        if let Some(v) = self.crop_width {
            cfg.crop_width = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps library errors onto the documented exit-code classes.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument { .. } => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_)
        | Error::Geometry(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::ShapeMismatch { .. } => EXIT_VERIFY,
    }
}

fn dispatch(cli: Cli) -> fusenet::Result<u8> {
    match cli.command {
        Command::Train(args) => {
            train::run(&args.resolve()?)?;
            Ok(0)
        }
        Command::Eval(args) => {
            eval::run(&args.resolve()?)?;
            Ok(0)
        }
        Command::Predict(args) => {
            predict::run(&args.resolve()?)?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            // Resolved only so a bad config still fails fast; the
            // suite itself is self-contained.
            args.resolve()?;
            if gradcheck::run()? {
                Ok(0)
            } else {
                Ok(EXIT_VERIFY)
            }
        }
        Command::Bench(args) => {
            bench::run(&args.resolve()?)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
