//! Command-line front end: training, dataset tools, the segmentation
//! booster, the HTTP service and the acceptance suite.

pub mod commands;
pub mod config;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dlow", version, about = "Domain flow translation between image domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a domain-flow model.
    Train(TrainArgs),
    /// Write synthetic source and target domains with a known style axis.
    GenSynthetic(GenSyntheticArgs),
    /// Translate a source dataset with per-image domainness.
    Translate(TranslateArgs),
    /// Print a style statistic of an image directory.
    Measure(MeasureArgs),
    /// Train a segmentation model, optionally with domain alignment.
    BoostTrain(BoostTrainArgs),
    /// Report per-class IoU and mIoU of a segmentation model.
    EvalSeg(EvalSegArgs),
    /// Serve translation over HTTP.
    Serve(ServeArgs),
    /// Run the acceptance criteria and print one line per criterion.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Source dataset directory or manifest.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target dataset; repeat for multiple targets.
    #[arg(long = "target")]
    pub targets: Vec<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sets both the resize and crop size.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub save_every: Option<u64>,
    #[arg(long)]
    pub sample_every: Option<u64>,
    /// Any configuration key, as `key=value` with a TOML value.
    #[arg(long = "set", value_parser = config::parse_override)]
    pub set: Vec<(String, toml::Value)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SyntheticKind {
    Hue,
    Brightness,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Style parameter of the source domain.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub theta_source: f64,
    /// Style parameter of a target domain; repeat for multiple targets.
    #[arg(long = "theta-target", required = true, allow_negative_numbers = true)]
    pub theta_targets: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SyntheticKind::Hue)]
    pub kind: SyntheticKind,
    /// Gaussian blur sigma in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub blur: f64,
    /// Give every domain the same content, producing aligned pairs.
    #[arg(long)]
    pub paired: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source dataset directory or manifest.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `uniform` or `fixed:<v>`.
    #[arg(long, default_value = "uniform")]
    pub z_mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    /// `mean-hue` or `mean-brightness`.
    #[arg(long, default_value = "mean-hue")]
    pub kind: String,
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoostTrainArgs {
    /// Translated dataset index carrying per-image domainness.
    #[arg(long, conflicts_with = "source", required_unless_present = "source")]
    pub source_index: Option<PathBuf>,
    /// Labelled source dataset.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabelled target dataset for alignment.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// TOML booster configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// `none`, `unweighted` or `weighted`.
    #[arg(long)]
    pub alignment: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labelled dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; repeat for several models.
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    #[arg(long, env = "DLOW_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Only the fast analytic criteria.
    #[arg(long, conflicts_with = "only")]
    pub quick: bool,
    /// Comma-separated criterion ids.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Directory for reusing trained models between runs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Digest file for the service check.
    #[arg(long)]
    pub golden: Option<PathBuf>,
    /// Write the digest file when it is missing.
    #[arg(long)]
    pub update_golden: bool,
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}
