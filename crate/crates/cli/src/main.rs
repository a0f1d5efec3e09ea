mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use growthcast::ErrorKind;

use config::RunConfig;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (bad flag, key or value)
  3  data error (missing or malformed input)
  4  numeric error (non-finite loss or distance)
  5  segmentation backend error

Errors are printed as one line: error[<kind>]: <message>";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(growthcast::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<growthcast::Error> for CliError {
    fn from(e: growthcast::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> (&'static str, u8) {
        match self {
            CliError::Config(_) => ("config", 2),
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => ("config", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Numeric => ("numeric", 4),
                ErrorKind::Backend => ("backend", 5),
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "growthcast", version, about = "Predict future crop growth stages with a conditional GAN and evaluate the predictions", after_help = EXIT_CODES)]
struct Cli {
    /// Flat key=value config file with dotted keys (train.lambda_l1=100).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Cap on worker threads (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Override any config key, e.g. --set train.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Validate and print the resolved configuration, then exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic plant time series with ground truth.
    Synth(SynthArgs),
    /// Build aligned cross-time pairs from a records CSV.
    Pair(PairArgs),
    /// Train the conditional GAN on a pair manifest.
    Train(TrainArgs),
    /// Generate later-stage images from early-stage inputs.
    Predict(PredictArgs),
    /// Segment plants and write per-instance traits.
    Segment(SegmentArgs),
    /// FID between test references, generated images and training references.
    Evaluate(EvaluateArgs),
    /// Regression, growth curves and summary from trait tables.
    Report(ReportArgs),
    /// Run synth, pair, train, predict, segment, evaluate and report end to end.
    Experiment,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n_plants: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    records: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    /// Maximum distance between image centers, metres.
    #[arg(long)]
    threshold: Option<String>,
    /// CSV with image_path and visible columns; enables pair cleaning.
    #[arg(long)]
    visibility: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest directory written by `pair`.
    #[arg(long)]
    pairs: Option<String>,
    /// Directory image paths are relative to (default: where the records came from).
    #[arg(long)]
    data_root: Option<String>,
    /// cauliflower, rosette or synthetic.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    data_root: Option<String>,
    /// Which split of the manifest to predict.
    #[arg(long)]
    split: Option<String>,
    /// Predict every PNG of a directory instead of a manifest.
    #[arg(long)]
    images: Option<String>,
    /// Disable dropout at prediction time (default keeps it, seeded).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    images: Option<String>,
    /// Records CSV supplying stage and treatment by file name.
    #[arg(long)]
    records: Option<String>,
    /// baseline or external.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    program: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    generated: Option<String>,
    #[arg(long)]
    reference_test: Option<String>,
    #[arg(long)]
    reference_train: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    reference_traits: Option<String>,
    #[arg(long)]
    generated_traits: Option<String>,
    #[arg(long)]
    fid: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    /// Central window fraction, or `none` to keep every plant.
    #[arg(long)]
    center_fraction: Option<String>,
}

fn collect_flags(cli: &Cli) -> Result<BTreeMap<String, String>, CliError> {
    let mut flags = BTreeMap::new();
    let mut put = |k: &str, v: &Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v.clone());
        }
    };
    put("out", &cli.out);
    put("workers", &cli.workers);
    put("seed", &cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            put("synth.n_plants", &a.n_plants);
            put("synth.stages", &a.stages);
            put("synth.image_size", &a.image_size);
        }
        Command::Pair(a) => {
            put("pair.records", &a.records);
            put("pair.horizon", &a.horizon);
            put("pair.threshold", &a.threshold);
            put("pair.visibility", &a.visibility);
        }
        Command::Train(a) => {
            put("train.pairs", &a.pairs);
            put("train.data_root", &a.data_root);
            put("train.profile", &a.profile);
            put("train.epochs", &a.epochs);
        }
        Command::Predict(a) => {
            put("predict.model", &a.model);
            put("predict.pairs", &a.pairs);
            put("predict.data_root", &a.data_root);
            put("predict.split", &a.split);
            put("predict.images", &a.images);
            put("predict.stochastic", &a.deterministic.then(|| "false".to_string()));
        }
        Command::Segment(a) => {
            put("segment.images", &a.images);
            put("segment.records", &a.records);
            put("segment.backend", &a.backend);
            put("segment.program", &a.program);
        }
        Command::Evaluate(a) => {
            put("evaluate.generated", &a.generated);
            put("evaluate.reference_test", &a.reference_test);
            put("evaluate.reference_train", &a.reference_train);
        }
        Command::Report(a) => {
            put("report.reference_traits", &a.reference_traits);
            put("report.generated_traits", &a.generated_traits);
            put("report.fid", &a.fid);
            put("report.image_size", &a.image_size);
            put("report.center_fraction", &a.center_fraction);
        }
        Command::Experiment => {}
    }
    // --set comes last so it can override anything.
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        flags.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(flags)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = collect_flags(&cli)?;
    let config = RunConfig::resolve(cli.config.as_deref(), |v| std::env::var(v).ok(), &flags)?;
    let workers: usize = config.get("workers")?;
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size worker pool: {e}")))?;
    }
    let name = match cli.command {
        Command::Synth(_) => "synth",
        Command::Pair(_) => "pair",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Segment(_) => "segment",
        Command::Evaluate(_) => "evaluate",
        Command::Report(_) => "report",
        Command::Experiment => "experiment",
    };
    commands::run(name, &config, cli.dry_run)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
