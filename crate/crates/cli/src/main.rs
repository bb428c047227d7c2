//! `onevos` — train, evaluate and inspect the all-in-one video object
//! segmentation transformer on synthetic moving-shape videos.
//!
//! Subcommands: `gen` (write synthetic videos), `train`, `eval`,
//! `inspect-attention` (per-layer attention-mass CSV) and `export-ratios`
//! (per-layer selection ratios of a checkpoint).
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 numeric
//! divergence. Every failure prints one line: `error[<category>]: <msg>`.
//! Log verbosity comes from the `ONEVOS_LOG` environment variable.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "onevos", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic moving-shape videos with ground-truth masks.
    Gen {
        /// TOML configuration file (synth section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (one seq_XXX subdirectory per sequence).
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of sequences.
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        /// Frames per sequence (overrides the config).
        #[arg(long)]
        frames: Option<usize>,
        /// Base seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on freshly generated synthetic sequences.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Propagate first-frame masks through videos and score them.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A single video directory (frame PNGs or frames/ + masks/), or a
        /// root containing seq_*/ subdirectories.
        #[arg(long)]
        video_dir: PathBuf,
        /// First-frame mask (defaults to masks/000...png next to frames).
        #[arg(long)]
        first_mask: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Predictions and report output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Memory policy: fifo or topk.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        store_interval: Option<usize>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        /// Attention decoupling mode (none, decoup1, decoup2, both).
        #[arg(long)]
        decoup: Option<String>,
        /// Accept a checkpoint whose config digest does not match.
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Export per-layer attention-mass decomposition over a video as CSV.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video_dir: PathBuf,
        #[arg(long)]
        first_mask: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Export the stabilized per-layer selection ratios of a checkpoint.
    ExportRatios {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ONEVOS_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            config,
            out_dir,
            sequences,
            frames,
            seed,
        } => commands::gen(config.as_deref(), &out_dir, sequences, frames, seed),
        Command::Train {
            config,
            out,
            metrics,
            steps,
        } => commands::train(config.as_deref(), &out, metrics.as_deref(), steps),
        Command::Eval {
            ckpt,
            video_dir,
            first_mask,
            config,
            out,
            policy,
            store_interval,
            cap,
            topk,
            decoup,
            force,
        } => commands::eval(commands::EvalArgs {
            ckpt,
            video_dir,
            first_mask,
            config,
            out,
            policy,
            store_interval,
            cap,
            topk,
            decoup,
            force,
        }),
        Command::InspectAttention {
            ckpt,
            video_dir,
            first_mask,
            config,
            out,
            force,
        } => commands::inspect_attention(
            &ckpt,
            &video_dir,
            first_mask.as_deref(),
            config.as_deref(),
            &out,
            force,
        ),
        Command::ExportRatios { ckpt, out } => commands::export_ratios(&ckpt, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", err.category(), err);
            let code = match err.category() {
                "config" => 3,
                "io" => 4,
                "numeric" => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
