//! `hdpipe`: train, generate, verify and benchmark pipelined HDC inference.

mod commands;

use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status: 0 ok, 1 verification failure, 2 configuration error, 3 I/O error.
#[derive(Parser, Debug)]
#[command(name = "hdpipe", version, about, after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const EXIT_HELP: &str = "Exit codes: 0 ok, 1 verification failure (or failed worker), 2 configuration error, 3 I/O error.";

const BENCH_HELP: &str = "CSV columns, in order: dataset, variant, n_samples, workers, tile_n, chunk_r, repeats, \
mean_ms, median_ms, stddev_ms, throughput, seed, affinity, tiling, topology.
throughput = n_samples * 1000 / mean_ms (samples per second).";

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a labeled dataset in one pass.
    Train(TrainArgs),
    /// Write a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Compare pipelined predictions against the reference path.
    Verify(VerifyArgs),
    /// Measure end-to-end latency and throughput.
    #[command(after_help = BENCH_HELP)]
    Bench(BenchArgs),
    /// Throughput ratios between two benchmark CSV files.
    Speedup(SpeedupArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labeled dataset (CSV or SHDX).
    #[arg(long)]
    dataset: PathBuf,
    /// Output model file (SHDM). A `<out>.json` sidecar records the settings.
    #[arg(long)]
    out: PathBuf,
    /// Hypervector dimension D.
    #[arg(long, default_value_t = 10000)]
    dim: usize,
    /// Expected feature count F; checked against the dataset.
    #[arg(long)]
    features: Option<usize>,
    /// Number of classes K (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    /// Seed for the random base matrix.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train on rows START..END only.
    #[arg(long, value_parser = parse_range)]
    rows: Option<Range<usize>>,
    /// Keep summed (integer-valued) class hypervectors instead of bipolar ones.
    #[arg(long)]
    unnormalized: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset; `.csv` writes CSV, anything else SHDX.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples N.
    #[arg(long = "batch-size", default_value_t = 400)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    features: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Distance of each class center from the origin per feature, in units
    /// of the noise standard deviation.
    #[arg(long, default_value_t = 3.0)]
    separation: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Use rows START..END of the dataset (e.g. a held-out split).
    #[arg(long, value_parser = parse_range)]
    rows: Option<Range<usize>>,
    /// Batch sizes to check; each uses the first N selected rows (default: all).
    #[arg(long = "batch-size", value_delimiter = ',')]
    batch_sizes: Vec<usize>,
    /// Total worker counts 2T.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    workers: Vec<usize>,
    #[arg(long = "tile-size", value_delimiter = ',', default_value = "32")]
    tile_sizes: Vec<usize>,
    #[arg(long = "chunk-r", value_delimiter = ',', default_value = "8")]
    chunk_r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "s,l")]
    variant: Vec<VariantArg>,
    #[arg(long = "no-tiling")]
    no_tiling: bool,
    /// Also check the row-parallel baseline.
    #[arg(long)]
    naive: bool,
    /// Fail unless reference accuracy on the labels reaches this value.
    #[arg(long = "min-accuracy")]
    min_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model file; without it a synthetic model is generated.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset supplying input rows (cycled if shorter than the batch).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Synthetic model feature count F.
    #[arg(long, default_value_t = 784)]
    features: usize,
    /// Synthetic model dimension D.
    #[arg(long, default_value_t = 10000)]
    dim: usize,
    /// Synthetic model class count K.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "l")]
    variant: Vec<BenchVariant>,
    #[arg(long = "batch-size", value_delimiter = ',', default_value = "1024")]
    batch_sizes: Vec<usize>,
    /// Total worker counts 2T.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    workers: Vec<usize>,
    #[arg(long = "tile-size", value_delimiter = ',', default_value = "32")]
    tile_sizes: Vec<usize>,
    #[arg(long = "chunk-r", value_delimiter = ',', default_value = "8")]
    chunk_r: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Leave worker placement to the OS.
    #[arg(long = "no-numa-bind")]
    no_numa_bind: bool,
    /// Keep all matrices in plain row-major layout.
    #[arg(long = "no-tiling")]
    no_tiling: bool,
    /// Append records to this CSV (header written when the file is new).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Topology such as `gamma=8,eta=4,smt=2` or `8x4x2`, instead of detection.
    #[arg(long = "topology-override")]
    topology_override: Option<String>,
}

#[derive(Args, Debug)]
struct SpeedupArgs {
    /// Benchmark CSV of the engine.
    #[arg(long)]
    engine: PathBuf,
    /// Benchmark CSV of the baseline.
    #[arg(long)]
    baseline: PathBuf,
    /// Use the best throughput per (N, 2T) on each side.
    #[arg(long = "best-of")]
    best_of: bool,
    /// Write the table as CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    S,
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchVariant {
    S,
    L,
    /// Row-parallel baseline without tiling, pipelining or pinning.
    Naive,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
        Command::Speedup(a) => commands::speedup(a),
    };
    match result {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
