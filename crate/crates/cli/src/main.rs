//! `wgae` command-line interface.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod dataset;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "WGAE_DATA_DIR";

#[derive(Parser, Clone, Debug)]
#[command(
    name = "wgae",
    version,
    about = "Weibull graph autoencoders with a gamma belief network decoder"
)]
pub struct Cli {
    /// Worker threads for parallel sections (0 uses every core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Turn a corpus and an edge list into a dataset file.
    Ingest(IngestArgs),
    /// Train a model and write its checkpoint.
    Train(RunArgs),
    /// Train per seed and report metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write topic trees or node subnetworks from a trained model.
    #[command(subcommand)]
    Export(ExportCommand),
    /// Run the sampler, gradient, KL and conjugacy check suites.
    Selftest(SelftestArgs),
    /// Draw a synthetic dataset from the generative model.
    Generate(GenerateArgs),
    /// Rerun a recorded command and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug)]
pub struct IngestArgs {
    /// Recipe file; the flags below replace its fields.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Directory that relative recipe paths resolve against.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Build edges from feature cosine similarity above this value.
    #[arg(long)]
    pub cosine_tau: Option<f64>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum FormatArg {
    TsvTriples,
    CoraContent,
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Dataset file written by `ingest` or `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML config with `[train]` and `[eval]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated training seeds; overrides `eval.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Override any config key, e.g. `--set train.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Clone, Debug)]
pub enum EvalCommand {
    /// Held-out edge AUC and AP.
    LinkPred(RunArgs),
    /// k-means on θ against node labels: ACC and NMI.
    Cluster(ModelRunArgs),
    /// Semi-supervised node classification accuracy.
    Classify(ModelRunArgs),
}

#[derive(Args, Clone, Debug)]
pub struct ModelRunArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Evaluate this checkpoint instead of training per seed.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug)]
pub enum ExportCommand {
    /// Tree of topics grown downward from a root topic.
    TopicTree(TopicTreeArgs),
    /// Nodes related to one node through individual topics.
    Subnetwork(SubnetworkArgs),
}

#[derive(Args, Clone, Debug)]
pub struct TopicTreeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Root as LAYER:TOPIC (1-based layer); default is every top-layer topic.
    #[arg(long)]
    pub root: Option<String>,
    /// Child threshold as a multiple of the uniform weight; default from the model config.
    #[arg(long)]
    pub tau_phi: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct SubnetworkArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Node index or original id.
    #[arg(long)]
    pub node: String,
    /// Link strength threshold; default from the model config.
    #[arg(long)]
    pub tau_u: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write results and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    /// Comma-separated layer widths.
    #[arg(long, value_delimiter = ',', default_value = "8,4")]
    pub widths: Vec<usize>,
    /// Expected number of edges.
    #[arg(long, default_value_t = 1000.0)]
    pub edges: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Fixed gamma rate of every θ layer.
    #[arg(long, default_value_t = 0.1)]
    pub c: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Where the rerun writes its outputs.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Ingest(a) => Some(&mut a.out),
            Command::Train(a) => Some(&mut a.out),
            Command::Eval(EvalCommand::LinkPred(a)) => Some(&mut a.out),
            Command::Eval(EvalCommand::Cluster(a) | EvalCommand::Classify(a)) => Some(&mut a.run.out),
            Command::Export(ExportCommand::TopicTree(a)) => Some(&mut a.out),
            Command::Export(ExportCommand::Subnetwork(a)) => Some(&mut a.out),
            Command::Selftest(a) => a.out.as_mut(),
            Command::Generate(a) => Some(&mut a.out),
            Command::Replay(_) => None,
        }
    }
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    commands::dispatch(cli.command, argv)
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
