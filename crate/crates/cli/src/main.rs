use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use rtcnet::config::KvConfig;
use rtcnet::datasets::DatasetKind;
use rtcnet::manifest::{Command, RunManifest, RunRequest};
use rtcnet::pipeline::{execute, replay};

/// Exudate segmentation with a residual encoder-decoder network.
#[derive(Parser, Debug)]
#[command(name = "rtcnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Config file in `key = value` form.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; every random choice derives from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dataset layout of --data.
    #[arg(long, global = true, value_name = "KIND", value_parser = parse_kind)]
    dataset: Option<DatasetKind>,

    /// Dataset root, image directory or image file.
    #[arg(long, global = true, value_name = "PATH")]
    data: Option<PathBuf>,

    /// Weight or checkpoint file.
    #[arg(long, global = true, value_name = "PATH")]
    weights: Option<PathBuf>,

    /// Directory of predicted masks (for evaluate).
    #[arg(long, global = true, value_name = "DIR")]
    predictions: Option<PathBuf>,

    /// Minimum positive pixels for an image to count as having exudate.
    #[arg(long, global = true, value_name = "N")]
    min_area: Option<usize>,

    /// Expert-mean cutoff for DiaretDB1 label fusion.
    #[arg(long, global = true, value_name = "X")]
    fusion_threshold: Option<f64>,

    /// Float precision for training: f32 or f64.
    #[arg(long, global = true, value_name = "P")]
    precision: Option<String>,

    /// Replay the run recorded in this manifest.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,

    /// Override any config key, e.g. `--set epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Materialize an augmented training set.
    Augment,
    /// Train a model; writes checkpoints, a log and weights.
    Train,
    /// Write a mask PNG and an overlay PNG per image.
    Segment,
    /// Pixel and image-level metrics against ground truth.
    Evaluate,
    /// Parameter count, layer table and shape chain.
    Summary,
    /// Split, augment, train and evaluate in one run.
    Pipeline,
    /// Write a small synthetic dataset in one of the supported layouts.
    Synth,
}

impl Sub {
    fn command(self) -> Command {
        match self {
            Sub::Augment => Command::Augment,
            Sub::Train => Command::Train,
            Sub::Segment => Command::Segment,
            Sub::Evaluate => Command::Evaluate,
            Sub::Summary => Command::Summary,
            Sub::Pipeline => Command::Pipeline,
            Sub::Synth => Command::Synth,
        }
    }
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    s.parse()
}

fn absolute(p: &Option<PathBuf>) -> Result<Option<PathBuf>, String> {
    p.as_deref().map(|p| std::path::absolute(p).map_err(|e| format!("{}: {e}", p.display()))).transpose()
}

fn request(command: Command, c: &Common) -> Result<RunRequest, String> {
    let mut config = match &c.config {
        Some(p) => KvConfig::from_file(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => KvConfig::new(),
    };
    for item in &c.set {
        let (k, v) = item.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        config.set(k.trim(), v.trim());
    }
    if let Some(n) = c.min_area {
        config.set("eval.min_area", n);
    }
    if let Some(x) = c.fusion_threshold {
        config.set("fusion_threshold", x);
    }
    if let Some(p) = &c.precision {
        config.set("precision", p);
    }
    let seed = match c.seed {
        Some(s) => s,
        None => config.parsed::<u64>("seed").map_err(|e| e.to_string())?.unwrap_or(0),
    };
    config.set("seed", seed);
    let mut req = RunRequest::new(command);
    req.seed = seed;
    req.config = config;
    req.dataset = c.dataset;
    req.data = absolute(&c.data)?;
    req.weights = absolute(&c.weights)?;
    req.predictions = absolute(&c.predictions)?;
    req.out = absolute(&c.out)?;
    Ok(req)
}

fn replay_from(path: &Path, command: Command, out: Option<PathBuf>) -> Result<String, String> {
    let manifest = RunManifest::from_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if manifest.request.command != command {
        return Err(format!("{} records a `{}` run, not `{command}`", path.display(), manifest.request.command));
    }
    replay(&manifest, out.as_deref()).map(|o| o.text).map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> Result<String, String> {
    let command = cli.command.command();
    if let Some(m) = &cli.common.manifest {
        return replay_from(m, command, absolute(&cli.common.out)?);
    }
    let req = request(command, &cli.common)?;
    execute(&req).map(|o| o.text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let name = cli.command.command().to_string();
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd.find_subcommand_mut(&name).map(|s| s.render_usage().to_string()).unwrap_or_default();
            eprintln!("error: {e}\n\n{usage}\n\nFor more information, try 'rtcnet {name} --help'.");
            ExitCode::from(2)
        }
    }
}
