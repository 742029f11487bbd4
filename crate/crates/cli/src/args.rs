use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dynrad", version, about = "Train, render, evaluate, and serve factorized radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from an analytic volume.
    GenData(GenDataArgs),
    /// Fit a model to a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Render a dataset's views and score them against its images.
    Eval(EvalArgs),
    /// Serve `/info` and `/render` over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scene {
    /// Three static blobs.
    Blob,
    /// One blob translated by a single parameter.
    MovingBlob,
    /// A shell with two appearance parameters.
    Shell,
}

/// `white`, `black`, or `r,g,b` with components in [0, 1].
pub fn parse_background(s: &str) -> Result<[f64; 3], String> {
    match s {
        "white" => return Ok([1.0; 3]),
        "black" => return Ok([0.0; 3]),
        _ => {}
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad color component {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        &[r, g, b] if parts.iter().all(|v| (0.0..=1.0).contains(v)) => Ok([r, g, b]),
        _ => Err(format!("expected white, black, or three values in [0, 1], got {s:?}")),
    }
}

/// One parameter tuple from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTuple(pub Vec<f64>);

/// Comma-separated parameter tuple, e.g. `0.25` or `0.1,0.9`.
pub fn parse_params(s: &str) -> Result<ParamTuple, String> {
    if s.trim().is_empty() {
        return Ok(ParamTuple(Vec::new()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad parameter value {p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(ParamTuple)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (manifest.json plus images/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "blob")]
    pub scene: Scene,
    /// Square image edge in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Icosphere subdivision level for camera placement.
    #[arg(long, default_value_t = 1)]
    pub level: usize,
    /// Use this many spiral orbit views instead of the icosphere.
    #[arg(long)]
    pub spiral: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Evenly spaced samples per parameter axis.
    #[arg(long, default_value_t = 5)]
    pub param_samples: usize,
    /// Explicit parameter tuple; repeatable, replaces the even grid.
    #[arg(long = "param", value_parser = parse_params)]
    pub params: Vec<ParamTuple>,
    #[arg(long, value_parser = parse_background, default_value = "white")]
    pub background: [f64; 3],
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the metrics log is written next to it.
    #[arg(long, default_value = "model.vsnf")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Final grid edge; the voxel budget is its cube.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Samples per ray after warm-up.
    #[arg(long, default_value_t = 96)]
    pub samples: usize,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for numbered PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON list of render requests; defaults to the inference sweep.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Views in the inference sweep.
    #[arg(long, default_value_t = 181)]
    pub views: usize,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Square image edge in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Parameter tuple for the sweep; defaults to the middle of each range.
    #[arg(long = "param", value_parser = parse_params)]
    pub params: Option<ParamTuple>,
    #[arg(long, value_parser = parse_background)]
    pub background: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose frames are scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Where to write the rendered PNGs; defaults to `<out stem>_renders`.
    #[arg(long)]
    pub renders: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Largest accepted width or height.
    #[arg(long, default_value_t = 1024)]
    pub max_size: usize,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = parse_background)]
    pub background: Option<[f64; 3]>,
    /// Render latency above which a warning is logged, in milliseconds.
    #[arg(long, default_value_t = 2000)]
    pub budget_ms: u64,
}
