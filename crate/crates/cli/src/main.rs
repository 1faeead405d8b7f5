//! `cvsdeblur`: dataset generation, training, evaluation and benchmarks for the
//! difference-guided deblurring network.

mod commands;
mod images;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cvs_deblur::net::{Ablation, ArchConfig, NetError};
use cvs_deblur::sensor::{DatasetError, DEFAULT_EXPOSURES_US};
use cvs_deblur::train::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use manifest::Recorder;

#[derive(Parser, Debug)]
#[command(name = "cvsdeblur", version, about = "Motion deblurring guided by spatial and temporal difference signals")]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with `train` and `arch` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Builds samples from PNG sequences or synthetic scenes.
    Datagen(DatagenArgs),
    /// Trains a model on a dataset.
    Train(TrainArgs),
    /// Reports PSNR and SSIM of restored and blurry frames.
    Eval(EvalArgs),
    /// Restores the mid-exposure frame of one sample.
    Infer(SampleArgs),
    /// Restores every intra-exposure frame of one sample.
    Video(SampleArgs),
    /// Sweeps rotating-disk speed, exposure and illumination.
    DiskBench(DiskBenchArgs),
    /// Checks every sample of a dataset.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    /// Directory of sequence folders (or a single folder) of numbered PNGs.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Number of procedural sequences to generate instead of reading PNGs.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// RGB exposure times in microseconds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EXPOSURES_US)]
    pub exposures: Vec<f64>,
    /// Difference-pathway tick interval in microseconds.
    #[arg(long, default_value_t = cvs_deblur::sensor::DEFAULT_TAU_DIFF_US)]
    pub tau_diff: f64,
    /// One seeded exposure per sequence instead of every exposure.
    #[arg(long)]
    pub random_exposure: bool,
    /// Require three extra frames after the exposure for tail augmentation.
    #[arg(long)]
    pub tail_headroom: bool,
    /// Apply the sRGB decoding curve to input PNGs.
    #[arg(long)]
    pub srgb_decode: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Branch configuration to train.
    #[arg(long, default_value = "full")]
    pub ablate: Ablation,
    /// Continue from the state stored in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Overrides `max_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Sample directory.
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SD index to align with (infer only; defaults to the exposure midpoint).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DiskBenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0])]
    pub rpm: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EXPOSURES_US)]
    pub exposures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub illuminations: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub sectors: usize,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchConfig,
}

impl RunConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }
}

/// Bad user input.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Non-finite values appeared in a computation.
#[derive(Debug)]
pub struct Numeric(pub String);

impl std::fmt::Display for Numeric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

fn net_code(e: &NetError) -> Option<u8> {
    match e {
        NetError::NonFinite | NetError::NonFiniteParam(_) => Some(EXIT_NUMERIC),
        NetError::Io(_) => Some(EXIT_IO),
        NetError::Checkpoint(cvs_deblur::autograd::CheckpointError::Io(_)) => Some(EXIT_IO),
        NetError::Tensor(cvs_deblur::autograd::TensorError::NonFinite) => Some(EXIT_NUMERIC),
        _ => None,
    }
}

/// Maps an error chain to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if cause.is::<Numeric>() {
            Some(EXIT_NUMERIC)
        } else if cause.is::<std::io::Error>() {
            Some(EXIT_IO)
        } else if let Some(e) = cause.downcast_ref::<image::ImageError>() {
            matches!(e, image::ImageError::IoError(_)).then_some(EXIT_IO)
        } else if let Some(e) = cause.downcast_ref::<DatasetError>() {
            matches!(e, DatasetError::Io { .. }).then_some(EXIT_IO)
        } else if let Some(e) = cause.downcast_ref::<NetError>() {
            net_code(e)
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => Some(EXIT_NUMERIC),
                TrainError::Io(_) => Some(EXIT_IO),
                TrainError::Net(n) => net_code(n),
                _ => None,
            }
        } else {
            None
        };
        if let Some(code) = code {
            return code;
        }
    }
    EXIT_VALIDATION
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let config = RunConfig::load(cli.config.as_ref())?;
    let name = match &cli.command {
        Command::Datagen(_) => "datagen",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Infer(_) => "infer",
        Command::Video(_) => "video",
        Command::DiskBench(_) => "disk-bench",
        Command::Validate(_) => "validate",
    };
    let seed = cli.seed.unwrap_or(config.train.seed);
    let mut rec = Recorder::new(name, seed);
    if let Some(path) = &cli.config {
        rec.input(path);
    }
    let out = cli.out.clone();
    let result = std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).and_then(|_| {
        let explicit = cli.config.is_some();
        match &cli.command {
            Command::Datagen(a) => commands::datagen(a, seed, &out, &mut rec),
            Command::Train(a) => commands::train(a, config, cli.seed, &out, &mut rec),
            Command::Eval(a) => commands::eval(a, explicit.then_some(&config.arch), &out, &mut rec),
            Command::Infer(a) => commands::infer(a, &out, &mut rec),
            Command::Video(a) => commands::video(a, &out, &mut rec),
            Command::DiskBench(a) => commands::disk_bench(a, &out, &mut rec),
            Command::Validate(a) => commands::validate(a, &out, &mut rec),
        }
    });
    let written = rec.finish(&out, result.as_ref().err());
    result?;
    written.map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
