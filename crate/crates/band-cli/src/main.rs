//! `band` — one executable over the whole pipeline: synthetic corpora,
//! training (including the frozen-trunk second stage), transfer regimes,
//! the connectome baseline, attribution maps, and gradient checks.
//!
//! Machine-readable JSON goes to stdout (or `--out`); progress notes go to
//! stderr. With a fixed `--seed` and worker count the JSON output is
//! byte-identical across runs. Exit codes: 0 ok, 2 usage, 3 data/format,
//! 4 numerical divergence.

mod cfg;
mod cmds;
mod gradsuite;

use band_core::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "band", version, about = "4D clip classification pipeline")]
pub struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed for data, init, shuffling, and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Size profile.
    #[arg(long, global = true, value_parser = ["desk", "hcp-shape", "tiny"])]
    pub profile: Option<String>,

    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Thread-pool size; default = logical cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic 4D corpus and its manifest.
    GenData(GenDataArgs),
    /// Train one of the four architectures.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Adapt a trained model to a new task (freeze | finetune | scratch).
    Transfer(TransferArgs),
    /// Parcellated-series baseline: GSR, bandpass, correlations, classifier.
    Connectome(ConnectomeArgs),
    /// Attribution on a trained model: temporal maps, Grad-CAM, embeddings.
    Analyze(AnalyzeArgs),
    /// Finite-difference checks of analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Directory to write instances + manifest.json into.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Which planted task to render.
    #[arg(long, default_value = "classify", value_parser = ["classify", "lag-probe", "transfer"])]
    pub task: String,
    /// Expected class count (validated against the task).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub subjects: usize,
    /// Runs per subject and class.
    #[arg(long, default_value_t = 1)]
    pub runs: u32,
    /// Override the task's voxel noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (contains manifest.json).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = ["cnn3d", "resnet3d", "band", "band-lstm"])]
    pub model: Option<String>,
    /// Clip length (frames per forward pass).
    #[arg(long, allow_negative_numbers = true)]
    pub k: Option<i64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Sequence head override for the frame-embedding models.
    #[arg(long, value_parser = ["transformer", "lstm"])]
    pub head: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Micro-batches per optimizer step (must divide batch).
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Subject fractions train,val,test (default 0.7,0.1,0.2).
    #[arg(long, value_name = "A,B,C")]
    pub fractions: Option<String>,
    /// Start from this checkpoint instead of fresh init.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Write the best-validation checkpoint here.
    #[arg(long, value_name = "FILE")]
    pub save: Option<PathBuf>,
    /// Second-stage protocol: freeze the trunk and train the head, either
    /// re-running the trunk each step (live) or from cached embeddings.
    #[arg(long, value_parser = ["live", "cached"])]
    pub stage2: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub init: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub k: Option<i64>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    #[arg(long, value_name = "A,B,C")]
    pub fractions: Option<String>,
}

#[derive(Args)]
pub struct TransferArgs {
    /// Target-task dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Source checkpoint (required for freeze and finetune).
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long, value_parser = ["freeze", "finetune", "scratch"])]
    pub regime: Option<String>,
    #[arg(long, value_parser = ["cnn3d", "resnet3d", "band", "band-lstm"])]
    pub model: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub k: Option<i64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long, value_name = "A,B,C")]
    pub fractions: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub save: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConnectomeArgs {
    /// Regions per series.
    #[arg(long, default_value_t = 16)]
    pub regions: usize,
    /// Frames per series.
    #[arg(long, default_value_t = 480)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training instances per class (an equal test set is drawn too).
    #[arg(long, default_value_t = 12)]
    pub per_class: usize,
    /// Strength of the class-coded region coupling.
    #[arg(long, default_value_t = 2.0)]
    pub coupling: f64,
    #[arg(long, default_value = "l1", value_parser = ["l1", "plain", "fcnn"])]
    pub classifier: String,
    #[arg(long, default_value_t = 0.009)]
    pub low: f64,
    #[arg(long, default_value_t = 0.25)]
    pub high: f64,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Sample period in seconds.
    #[arg(long, default_value_t = 0.72)]
    pub period: f64,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// Hidden width of the fcnn classifier.
    #[arg(long, default_value_t = 320)]
    pub hidden: usize,
    /// Training epochs of the fcnn classifier.
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub init: PathBuf,
    #[arg(long, value_parser = ["temporal", "gradcam", "embeddings"])]
    pub mode: String,
    #[arg(long, allow_negative_numbers = true)]
    pub k: Option<i64>,
    /// Frame to attribute, 1-indexed.
    #[arg(long, default_value_t = 7, allow_negative_numbers = true)]
    pub frame: i64,
    /// Conv stage whose activations drive the spatial map.
    #[arg(long, default_value = "stage4")]
    pub stage: String,
    /// Target class for the spatial map (default: the instance's label).
    #[arg(long)]
    pub class: Option<usize>,
    /// Manifest index of the instance to map.
    #[arg(long, default_value_t = 0)]
    pub instance: usize,
    /// Directory for artifact files (CSV / volumes / metadata).
    #[arg(long, value_name = "DIR")]
    pub dump: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Run the whole suite.
    #[arg(long, conflicts_with = "op")]
    pub all: bool,
    /// Run one named check (see --all output for names).
    #[arg(long)]
    pub op: Option<String>,
    /// Acceptance threshold on the worst relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 4,
        Error::Format { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::ShapeMismatch(_)
        | Error::NonFinite(_)
        | Error::StaleCache(_)
        | Error::Label { .. }
        | Error::DegenerateRegressor(_)
        | Error::DegenerateSeries { .. }
        | Error::DegenerateLabels(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> band_core::Result<cmds::Outcome> {
    let common = cfg::Common::resolve(&cli)?;
    if common.workers > 0 {
        // First (and only) global-pool initialization in this process.
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global()
            .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    }
    match &cli.cmd {
        Cmd::GenData(a) => cmds::gen_data(&common, a),
        Cmd::Train(a) => cmds::train(&common, a),
        Cmd::Eval(a) => cmds::eval(&common, a),
        Cmd::Transfer(a) => cmds::transfer(&common, a),
        Cmd::Connectome(a) => cmds::connectome(&common, a),
        Cmd::Analyze(a) => cmds::analyze(&common, a),
        Cmd::Gradcheck(a) => cmds::gradcheck(&common, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    match run(cli) {
        Ok(outcome) => {
            let text = serde_json::to_string_pretty(&outcome.json).expect("result serializes");
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, text + "\n") {
                        eprintln!("error: cannot write {}: {e}", path.display());
                        return ExitCode::from(3);
                    }
                    eprintln!("wrote {}", path.display());
                }
                None => println!("{text}"),
            }
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
