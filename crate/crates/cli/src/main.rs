//! `cloudlift`: train, run, lower, verify and deploy the cloud-detection network.
//!
//! Exit codes: 0 success, 1 verification or threshold failure, 2 invalid user
//! input (flags, file contents, model/raster mismatch), 3 file system errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cloudlift",
    version,
    about = "Cloud detection network: training, tiled inference, lowering to whole-image raster operations and Earth Engine script emission"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on synthetic patches or a directory of raster/mask pairs
    Train(TrainArgs),
    /// Compute the cloud probability of a raster, optionally tiled
    Infer(InferArgs),
    /// Print or save the lowered program of a model
    Lower(LowerArgs),
    /// Check the lowered program against the reference engine on random inputs
    Verify(VerifyArgs),
    /// Emit an Earth Engine client script and its parameter tables
    EmitGee(EmitArgs),
    /// Accuracy report of a predicted mask against a reference mask
    Metrics(MetricsArgs),
    /// Write model files for a freshly initialized or an existing model
    ExportParams(ExportArgs),
    /// Validate a manifest and parameter table, optionally saving a copy
    ImportParams(ImportArgs),
    /// Write synthetic labelled patches as raster/mask pairs
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train on this many synthetic patches
    #[arg(long, value_name = "N", conflicts_with = "data", required_unless_present = "data")]
    synthetic: Option<usize>,
    /// Directory of <name>.rst.json rasters with <name>.pgm masks
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Network depth (number of pooling levels)
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Side of synthetic patches in pixels
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Seed of the synthetic data, the initialization and the shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    /// Stop once the inference-mode accuracy reaches this; exit 1 if never reached
    #[arg(long, value_name = "OA")]
    target_oa: Option<f64>,
    /// Evaluate the inference-mode accuracy after every epoch
    #[arg(long)]
    evaluate: bool,
    /// Model stem; writes <STEM>.manifest.json and <STEM>.params.csv
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
    /// Write the JSON-lines epoch log here instead of standard output
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Reference,
    Lowered,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Model manifest or stem
    #[arg(long, value_name = "MANIFEST")]
    model: PathBuf,
    /// Input raster (.rst.json header or stem)
    #[arg(long, value_name = "RASTER")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EngineArg::Reference)]
    engine: EngineArg,
    /// Tile core size in pixels; omit for whole-image inference
    #[arg(long, value_name = "PX")]
    tile: Option<usize>,
    /// Cloud threshold applied for --mask-out (probability >= threshold)
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Write the probability raster here
    #[arg(long, value_name = "RASTER")]
    prob_out: Option<PathBuf>,
    /// Write the thresholded PGM mask here
    #[arg(long, value_name = "PGM")]
    mask_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LowerArgs {
    /// Model manifest or stem
    #[arg(long, value_name = "MANIFEST")]
    model: PathBuf,
    /// Write the program text here instead of standard output
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Input height, enabling size checks at pooling
    #[arg(long, requires = "width")]
    height: Option<usize>,
    /// Input width, enabling size checks at pooling
    #[arg(long, requires = "height")]
    width: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    /// Concatenate the skip stream before the upsampled one
    SwapConcat,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Verify this model instead of random models
    #[arg(long, value_name = "MANIFEST")]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Depths of the random models, cycled through
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    depths: Vec<usize>,
    /// Seed of trial 0; trial t uses SEED + t
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input bands of the random models
    #[arg(long, default_value_t = 10)]
    bands: usize,
    /// Smallest input side in pixels
    #[arg(long, default_value_t = 16)]
    min_size: usize,
    /// Largest input side in pixels
    #[arg(long, default_value_t = 64)]
    max_size: usize,
    /// Deliberately miscompile, to confirm that verification catches it
    #[arg(long, value_enum)]
    fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
struct EmitArgs {
    /// Model manifest or stem
    #[arg(long, value_name = "MANIFEST")]
    model: PathBuf,
    /// Output stem; writes <STEM>.gee.js, <STEM>.<tensor>.csv and <STEM>.report.json
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
    /// Asset path stem of the uploaded tables
    #[arg(long, value_name = "PREFIX")]
    asset_prefix: Option<String>,
    /// Inline tensors with at most N values
    #[arg(long, value_name = "N", default_value_t = 512, conflicts_with = "inline_all")]
    inline_threshold: usize,
    /// Inline every tensor; no tables are written
    #[arg(long)]
    inline_all: bool,
    /// Comma-separated input band names
    #[arg(long, value_delimiter = ',')]
    bands: Vec<String>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Predicted mask (PGM)
    #[arg(long, value_name = "PGM")]
    pred: PathBuf,
    /// Reference mask (PGM)
    #[arg(long = "ref", value_name = "PGM")]
    reference: PathBuf,
    /// Dilate the predicted cloud by this Chebyshev radius first
    #[arg(long, value_name = "R")]
    dilate: Option<usize>,
    /// Print JSON instead of the annotated text report
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    /// He-normal convolutions, identity batch norm, the training initialization
    He,
    /// Randomized every tensor, including batch norm statistics
    Random,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Re-export this model canonically instead of initializing one
    #[arg(long, value_name = "MANIFEST", conflicts_with_all = ["depth", "bands", "init"])]
    model: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model stem to write
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportArgs {
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Parameter table; defaults to the one beside the manifest
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
    /// Save a canonical copy under this stem
    #[arg(long, value_name = "STEM")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Patch side in pixels
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
