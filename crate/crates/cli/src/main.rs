//! `gnetseg` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a domain error (bad file, failed
//! validation, diverged training), 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gnetseg::{Head, InputFormat, ModelConfig, Variant, WidthConfig};

#[derive(Parser, Debug)]
#[command(name = "gnetseg", version, about = "Build, check, train and cost chip-constrained segmentation models")]
pub struct Cli {
    /// Seed for weight init, data generation and shuffling
    #[arg(long, global = true, env = "GNETSEG_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a model with seeded weights and write a checkpoint
    Build(BuildArgs),
    /// Check a model against a chip profile; exit 1 if it does not fit
    Validate(ValidateArgs),
    /// Segment one image, or every image of a manifest
    Infer(InferArgs),
    /// Train on a manifest or on generated shapes
    Train(TrainArgs),
    /// Report mIoU over a manifest
    Eval(EvalArgs),
    /// Predict frame rates from fitted link profiles
    Bench(BenchArgs),
    /// Fit link profiles to measured frame rates
    Calibrate(CalibrateArgs),
    /// Fold a colour conversion into the first layer of a checkpoint
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Integer,
    Softmax,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model family: large, medium, small (integer heads on large/medium use the reformat decoder)
    #[arg(long, default_value = "large")]
    pub model: String,
    /// Input width and height in pixels
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    /// Input format: y, yuv or rgb
    #[arg(long, default_value = "y")]
    pub format: String,
    /// Mask head
    #[arg(long, value_enum, default_value = "integer")]
    pub head: HeadArg,
    /// Number of classes
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Use this channel width for every major layer instead of the defaults
    #[arg(long)]
    pub width: Option<usize>,
    /// Sublayers per major layer
    #[arg(long, default_value_t = 2)]
    pub sublayers: usize,
}

impl ModelArgs {
    pub fn config(&self) -> gnetseg::Result<ModelConfig> {
        let head = match self.head {
            HeadArg::Integer => Head::IntegerEncoding { num_classes: self.classes },
            HeadArg::Softmax => Head::Softmax { num_classes: self.classes },
        };
        let variant = Variant::resolve(&self.model, head)?;
        let format: InputFormat = self.format.parse()?;
        let widths = match self.width {
            Some(w) => WidthConfig::uniform(variant, w, self.sublayers),
            None => WidthConfig {
                sublayers: self.sublayers,
                ..WidthConfig::default_for(variant)
            },
        };
        Ok(ModelConfig::new(variant, self.size, format, head).with_widths(widths))
    }
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Checkpoint to check; without it the model flags describe a fresh build
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Chip profile (TOML); defaults to the built-in profile
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PGM or PPM)
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub image: Option<PathBuf>,
    /// Mask to write for --image
    #[arg(long, requires = "image")]
    pub out: Option<PathBuf>,
    /// Segment every image listed here
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    /// Directory for masks, named after each input image
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Run 8-bit quantized inference, calibrated on the images of this manifest
    #[arg(long)]
    pub quantize_with: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Training pairs; without it shapes are generated
    #[arg(long, requires = "val_manifest")]
    pub train_manifest: Option<PathBuf>,
    #[arg(long, requires = "train_manifest")]
    pub val_manifest: Option<PathBuf>,
    /// Generated training images
    #[arg(long, default_value_t = 500)]
    pub synthetic_train: usize,
    /// Generated validation images
    #[arg(long, default_value_t = 100)]
    pub synthetic_val: usize,
    /// Write the generated validation split (images, labels, manifest) here
    #[arg(long)]
    pub export_val: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Append per-epoch metrics as JSON lines to this file
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Leave wall-clock timestamps out of metrics lines
    #[arg(long)]
    pub no_timestamps: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Image/label pairs to score
    #[arg(long)]
    pub manifest: PathBuf,
    /// Segment with this checkpoint
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score masks already written by `infer --out-dir`
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Class count when scoring --predictions
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Link name (host/interface) or interface (usb2, usb3); all links if absent
    #[arg(long)]
    pub link: Option<String>,
    /// Fitted profiles from `calibrate`; fitted on the built-in table if absent
    #[arg(long)]
    pub profiles: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Measurement CSV (model,host,interface,fps[,miou]); the built-in table if absent
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Drop every row of this host
    #[arg(long)]
    pub exclude_host: Vec<String>,
    /// Keep a row out of the fit and report its prediction, as MODEL@HOST/INTERFACE
    #[arg(long)]
    pub holdout: Vec<String>,
    /// Fit the chip MAC rate too instead of using the fixed reference rate
    #[arg(long)]
    pub fit_compute: bool,
    /// Fitted profiles to write (TOML)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target input format
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                gnetseg::Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
