//! `drnet`: dataset generation, STMap extraction, training, evaluation and
//! baselines from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 filesystem error.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "drnet",
    version,
    about = "Remote heart rate estimation from spatial-temporal maps"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Patch-crop probability.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    /// Sub-cell factor of the enlarged ROI grid.
    #[arg(long, global = true)]
    pub gamma: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for per-clip stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus per-clip traces and pulses).
    Synth {
        #[arg(long, default_value_t = 50)]
        clips: usize,
        /// Disable drift, spikes, sensor noise and flicker.
        #[arg(long)]
        noise_free: bool,
    },
    /// Build an STMap from a pixel trace, or from a video plus landmarks.
    Stmap {
        #[arg(long, conflicts_with_all = ["video", "landmarks"], required_unless_present = "video")]
        trace: Option<PathBuf>,
        /// RVF1 raw video.
        #[arg(long, requires = "landmarks")]
        video: Option<PathBuf>,
        /// 68-point landmarks, one frame per line.
        #[arg(long, requires = "video")]
        landmarks: Option<PathBuf>,
        /// Average in YUV instead of RGB.
        #[arg(long)]
        yuv: bool,
        /// Keep eyes and mouth inside the ROI cells.
        #[arg(long)]
        keep_features: bool,
    },
    /// Patch-crop an STMap with its enlarged counterpart.
    Augment {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        enlarged: PathBuf,
    },
    /// Fit the pulse autoencoder to a dataset's reference pulses.
    PretrainAe {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the estimator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained autoencoder weights; fitted from the data when absent.
        #[arg(long)]
        ae_weights: Option<PathBuf>,
        /// Per-epoch checkpoints (default: <out>/checkpoints).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Evaluate trained weights on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run a colour-based baseline on a dataset.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// green, chrom or pos.
        #[arg(long)]
        method: String,
    },
    /// Power spectral density of a pulse file, or of a baseline applied to a trace.
    Psd {
        #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
        bvp: Option<PathBuf>,
        #[arg(long, requires = "method")]
        trace: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = drnet::dsp::DEFAULT_NFFT)]
        nfft: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
