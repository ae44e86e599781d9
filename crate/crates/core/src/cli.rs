//! Command-line front end.
//!
//! Usage errors exit with 2. Runtime failures exit with 1 and print one
//! line to stderr: `error<TAB>kind<TAB>message`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::augment_pair;
use crate::config::ConfigMap;
use crate::metrics::evaluate;
use crate::network::{load_checkpoint, load_checkpoint_expecting, Network, NetworkConfig, NETWORK_KEYS};
use crate::train::{infer, train, TrainConfig, TrainError, TRAIN_KEYS};
use crate::volio::{load_intensity, load_labels, save_volume};

#[derive(Debug, Parser)]
#[command(name = "voxseg", version, about = "Full-volume 3D brain segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a data manifest.
    Train(TrainArgs),
    /// Segment one volume with a checkpoint.
    Infer(InferArgs),
    /// Compare a predicted label volume with ground truth.
    Evaluate(EvaluateArgs),
    /// Apply elastic deformation and noise to an image/label pair.
    Augment(AugmentArgs),
    /// Print the layer listing and parameter count.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Require the checkpoint to match this network config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Defaults to one more than the largest label present.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input extent as `D,H,W`.
    #[arg(long, default_value = "181,217,181")]
    pub dims: String,
}

/// A runtime failure with a short machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        CliError {
            kind,
            message: message.to_string(),
        }
    }

    pub fn line(&self) -> String {
        format!("error\t{}\t{}", self.kind, self.message.replace(['\n', '\t'], " "))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) => "config",
            TrainError::Data { .. } | TrainError::Volume(_) => "data",
            TrainError::Io { .. } => "io",
            TrainError::Diverged(_) => "diverged",
            TrainError::Network(_) | TrainError::Tensor(_) => "network",
            _ => "train",
        };
        CliError::new(kind, e)
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigMap, CliError> {
    match path {
        Some(p) => ConfigMap::load(p).map_err(|e| CliError::new("config", e)),
        None => Ok(ConfigMap::new()),
    }
}

fn network_config(map: &ConfigMap) -> Result<NetworkConfig, CliError> {
    let known: Vec<&str> = TRAIN_KEYS.iter().chain(NETWORK_KEYS).copied().collect();
    map.check_known(&known).map_err(|e| CliError::new("config", e))?;
    NetworkConfig::from_config_map(map).map_err(|e| CliError::new("config", e))
}

fn parse_dims(s: &str) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new("usage", format!("--dims `{s}`: {e}")))?;
    v.try_into()
        .map_err(|_| CliError::new("usage", format!("--dims `{s}` must have three extents")))
}

fn cmd_train(a: TrainArgs) -> Result<String, CliError> {
    let mut map = load_config(a.config.as_deref())?;
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.set(k, v);
        }
    };
    set("data_dir", a.data_dir.map(|p| p.display().to_string()));
    set("out_dir", a.out_dir.map(|p| p.display().to_string()));
    set("seed", a.seed.map(|v| v.to_string()));
    set("precision", a.precision);
    set("loss", a.loss);
    set("steps", a.steps.map(|v| v.to_string()));
    set("fold", a.fold.map(|v| v.to_string()));
    set("patience", a.patience.map(|v| v.to_string()));
    let cfg = TrainConfig::from_config_map(&map)?;
    let out = train(&cfg)?;
    let last = out.log.last().map_or(f32::NAN, |r| r.loss);
    Ok(format!(
        "steps {} skipped {} final_loss {:e} stopped_early {}{}",
        out.steps_run,
        out.skipped_steps,
        last,
        out.stopped_early,
        out.checkpoints
            .last()
            .map_or(String::new(), |p| format!(" checkpoint {}", p.display()))
    ))
}

fn cmd_infer(a: InferArgs) -> Result<String, CliError> {
    let net = match &a.config {
        Some(p) => {
            let expected = network_config(&load_config(Some(p))?)?;
            load_checkpoint_expecting(&a.checkpoint, &expected)
        }
        None => load_checkpoint(&a.checkpoint),
    }
    .map_err(|e| CliError::new("checkpoint", e))?;
    let image = load_intensity(&a.input).map_err(|e| CliError::new("data", e))?;
    let (labels, elapsed) = infer(&net, &image)?;
    save_volume(&labels, &a.output).map_err(|e| CliError::new("io", e))?;
    Ok(format!("forward_ms {:.3} output {}", elapsed.as_secs_f64() * 1e3, a.output.display()))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<String, CliError> {
    let pred = load_labels(&a.pred).map_err(|e| CliError::new("data", e))?;
    let truth = load_labels(&a.truth).map_err(|e| CliError::new("data", e))?;
    let l = a.num_classes.unwrap_or_else(|| pred.num_classes().max(truth.num_classes()));
    let report = evaluate(&truth, &pred, l).map_err(|e| CliError::new("metrics", e))?;
    let text = report.to_string();
    if let Some(out) = &a.out {
        fs::write(out, format!("{text}\n")).map_err(|e| CliError::new("io", format!("{}: {e}", out.display())))?;
    }
    Ok(text)
}

fn cmd_augment(a: AugmentArgs) -> Result<String, CliError> {
    let mut map = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        map.set("seed", s.to_string());
    }
    let cfg = TrainConfig::from_config_map(&map)?;
    let image = load_intensity(&a.input).map_err(|e| CliError::new("data", e))?;
    let labels = load_labels(&a.labels).map_err(|e| CliError::new("data", e))?;
    let (xo, yo) = augment_pair(&image, &labels, cfg.deform.as_ref(), cfg.noise.as_ref(), cfg.seed)
        .map_err(|e| CliError::new("augment", e))?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::new("io", format!("{}: {e}", a.out_dir.display())))?;
    let (pi, pl) = (a.out_dir.join("image.vvol"), a.out_dir.join("labels.vvol"));
    save_volume(&xo, &pi).map_err(|e| CliError::new("io", e))?;
    save_volume(&yo, &pl).map_err(|e| CliError::new("io", e))?;
    Ok(format!("image {} labels {}", pi.display(), pl.display()))
}

fn cmd_inspect(a: InspectArgs) -> Result<String, CliError> {
    let cfg = network_config(&load_config(a.config.as_deref())?)?;
    let dims = parse_dims(&a.dims)?;
    let net = Network::build(&cfg, 0).map_err(|e| CliError::new("config", e))?;
    let listing = net.listing(dims).map_err(|e| CliError::new("network", e))?;
    Ok(listing.to_string())
}

/// Run one command; returns stdout text or the error.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parse `argv` (including the program name), run, print, and return the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            1
        }
    }
}
