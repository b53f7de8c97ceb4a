mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Noisy-MNIST anomaly detection with reconstruction error weighted by a
/// class-activation region of interest.
#[derive(Debug, Parser)]
#[command(name = "spade", version, about)]
pub struct Cli {
    /// JSON file layered over the built-in defaults (flags win over it).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root for MNIST files and generated corpora [env: SPADE_DATA_DIR].
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    /// Worker thread cap.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the noisy corpus from the MNIST IDX files.
    Generate(GenerateArgs),
    /// Train the VAE (normal class only) or the classifier (normal vs. known anomaly).
    Train(TrainArgs),
    /// Score the evaluation set with one method.
    Score(ScoreArgs),
    /// Compute AUROC from score files, or run the whole known-digit experiment.
    Evaluate(EvaluateArgs),
    /// Write saliency overlays for chosen evaluation samples.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SplitFlags {
    /// Split and noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub normal_digit: Option<u8>,
    /// Known anomaly digit (the classifier's second class).
    #[arg(long)]
    pub known_digit: Option<u8>,
    /// Cap on training images per class.
    #[arg(long)]
    pub max_train_per_class: Option<usize>,
    /// Cap on evaluation images per digit.
    #[arg(long)]
    pub max_eval_per_digit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory with the four uncompressed IDX files.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Vae,
    Cnn,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Required for the classifier; must match the corpus.
    #[arg(long)]
    pub known_digit: Option<u8>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Option<spade_core::detector::Method>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// VAE checkpoint directory.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    /// Classifier checkpoint directory.
    #[arg(long)]
    pub cnn: Option<PathBuf>,
    /// Output CSV path; a JSON twin is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write heatmap overlays of the highest-scoring samples here.
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub overlay_count: usize,
    /// Decision threshold (strict `score > threshold` flags a sample).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Derive the threshold from the training classes (Youden's J).
    #[arg(long, conflicts_with = "threshold")]
    pub youden: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Score JSON files from `spade score`; without them the full
    /// experiment is run from the MNIST files.
    #[arg(long, num_args = 1..)]
    pub scores: Vec<PathBuf>,
    /// Known digits to run, e.g. `--digits 1,3`.
    #[arg(long, value_delimiter = ',')]
    pub digits: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<spade_core::detector::Method>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep checkpoints and per-cell scores under the report directory.
    #[arg(long)]
    pub keep_artifacts: bool,
    #[arg(long)]
    pub max_train_per_class: Option<usize>,
    #[arg(long)]
    pub max_eval_per_digit: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub cnn: PathBuf,
    /// Evaluation sample ids to render.
    #[arg(long, num_args = 1.., required = true)]
    pub samples: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<spade_core::detector::Method, String> {
    s.parse().map_err(|e: spade_core::Error| e.to_string())
}

/// Usage problems exit 1, failures while running exit 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
