//! `hprobe`: dataset generation, oracle activations, probe fitting,
//! interventions, stability studies, grid search and reports.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hprobe::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "hprobe", version, about = "Hierarchical probe experiments on tree traversal data")]
struct Cli {
    /// Artifact store root. Falls back to $HPROBE_STORE, then ./hprobe-store.
    #[arg(long, global = true, value_name = "DIR")]
    store: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample traversal examples and write them as a dataset file.
    CreateDataset(CreateDatasetArgs),
    /// Fit distance and depth probes per layer and evaluate them.
    EvalProbe(EvalProbeArgs),
    /// Build ablation bases, re-fit probes on ablated activations and
    /// summarize response or logit-shift files.
    Intervene(InterveneArgs),
    /// Fit probes on disjoint train folds and compare them.
    Similarity(SimilarityArgs),
    /// Write synthetic activations with a planted hierarchical subspace.
    Synth(SynthArgs),
    /// Sweep projection dimension, learning rate and step count.
    Grid(GridArgs),
    /// Render tables and plots from stored results.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum Setting {
    Tree,
}

impl Setting {
    fn dir(self) -> &'static str {
        "tree"
    }
}

#[derive(Args, Debug, serde::Serialize)]
struct Common {
    /// Task setting.
    #[arg(long, value_enum, default_value = "tree")]
    setting: Setting,
    /// Model or oracle tag naming the run directory.
    #[arg(long, default_value = "oracle")]
    tag: String,
    /// Seed for every random choice in the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, serde::Serialize)]
struct CreateDatasetArgs {
    #[arg(long, value_enum, default_value = "tree")]
    setting: Setting,
    /// Inclusive tree depth range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1, 2])]
    depth_range: Vec<u32>,
    /// Inclusive traversal step-count range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1, 2])]
    steps_range: Vec<u32>,
    #[arg(long, default_value_t = 1000)]
    num_samples: usize,
    /// Sparsify each tree with a sparsity drawn uniformly from this range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    sparsity_range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; defaults to <store>/<setting>/dataset.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct DataArgs {
    /// Dataset file; defaults to <store>/<setting>/dataset.jsonl.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Activation file; defaults to <store>/<setting>/<tag>/activations.hpak.
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Scored responses used for exact/inexact buckets; defaults to the
    /// run's responses.jsonl when present.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Layers to process; all stored layers by default.
    #[arg(long, num_args = 1..)]
    layers: Option<Vec<u32>>,
    /// Number of principal components kept before probing.
    #[arg(long, default_value_t = 10)]
    pca_dim: usize,
    /// Fraction of examples used for training.
    #[arg(long, default_value_t = 0.5)]
    train_split: f64,
}

#[derive(Args, Debug, serde::Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    depth_alpha: f64,
    /// Ridge penalty of the depth probe.
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    /// Pairs per optimizer step; full batch when omitted.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, serde::Serialize)]
struct EvalProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Distance-probe projection dimensions.
    #[arg(long, num_args = 1.., default_values_t = [5])]
    proj_dims: Vec<usize>,
}

#[derive(Args, Debug, serde::Serialize)]
struct InterveneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Projection dimension of the stored probe whose subspace is ablated.
    #[arg(long, default_value_t = 5)]
    proj_dim: usize,
    /// Bases to build.
    #[arg(long, num_args = 1.., default_values = ["probe", "random", "pca_cot", "pca_nodes", "full", "none"])]
    ablation_kind: Vec<String>,
    /// Skip re-fitting probes on ablated activations.
    #[arg(long)]
    no_refit: bool,
    /// Responses before intervention, for the accuracy protocol.
    #[arg(long, requires = "responses_after")]
    responses_before: Option<PathBuf>,
    /// KIND=PATH responses after ablating KIND.
    #[arg(long, num_args = 1.., requires = "responses_before")]
    responses_after: Option<Vec<String>>,
    /// Include originally inexact examples and report rescue rates.
    #[arg(long)]
    include_inexact: bool,
    /// Logit-shift records, one JSON object per line.
    #[arg(long)]
    logit_shifts: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct SimilarityArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, num_args = 1.., default_values_t = [5])]
    proj_dims: Vec<usize>,
    /// Monte Carlo trials for the random-subspace null.
    #[arg(long, default_value_t = 2000)]
    null_trials: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum Profile {
    /// Planted subspace with distractors.
    Default,
    /// Adds jittered coordinates and echo blocks for component sweeps.
    Sweep,
}

#[derive(Args, Debug, serde::Serialize)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file; defaults to <store>/<setting>/dataset.jsonl.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    profile: Profile,
    /// Layers to generate.
    #[arg(long, num_args = 1.., default_values_t = [0, 1, 2, 3])]
    layers: Vec<u32>,
    /// Planted-signal gain per layer; rises then falls across layers by
    /// default.
    #[arg(long, num_args = 1..)]
    layer_gains: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    inexact_fraction: f64,
}

#[derive(Args, Debug, serde::Serialize)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, num_args = 1.., default_values_t = [2, 3, 4, 5])]
    proj_dims: Vec<usize>,
    #[arg(long, num_args = 1.., default_values_t = [1e-3, 5e-3, 1e-2])]
    lrs: Vec<f64>,
    #[arg(long, num_args = 1.., default_values_t = [500, 1000, 1500])]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1e-2)]
    depth_alpha: f64,
}

#[derive(Args, Debug, serde::Serialize)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory; defaults to <store>/<setting>/<tag>/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::DataIntegrity => 3,
        ErrorClass::Numerical => 4,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Usage => "usage",
        ErrorClass::DataIntegrity => "data-integrity",
        ErrorClass::Numerical => "numerical",
    }
}

fn fail(class: ErrorClass, msg: &str) -> ExitCode {
    let line = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("hprobe: error[{}]: {line}", class_name(class));
    ExitCode::from(exit_code(class))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return fail(ErrorClass::Usage, first);
        }
    };
    let store = cli.store.clone().unwrap_or_else(hprobe::store::store_root);
    let result: Result<(), Error> = commands::run(&store, &cli.command, &argv);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}
