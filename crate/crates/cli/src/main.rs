//! `anatembed` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "anatembed",
    version,
    about = "Pixel-wise anatomical embeddings on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus.
    Generate(GenerateArgs),
    /// Train an encoder.
    Train(TrainArgs),
    /// Embed one image with a trained encoder.
    Embed(EmbedArgs),
    /// Match template points in query images.
    Match(MatchArgs),
    /// Benchmark a checkpoint on held-out phantoms.
    Eval(EvalArgs),
    /// Retrain and evaluate once per parameter value.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Extent per axis, comma separated (`z,y,x` in 3D).
    #[arg(long, value_delimiter = ',', required = true)]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub variation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of phantoms to train on; without it the `[data]` section
    /// is generated and its training split used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.seed` and `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Phantom sidecar (`.json`) or stem.
    #[arg(long)]
    pub image: PathBuf,
    /// Output tensor file; a `.json` description is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Tile core per axis, comma separated; whole image when absent.
    #[arg(long, value_delimiter = ',')]
    pub tile: Vec<usize>,
}

#[derive(Args)]
#[group(id = "target", required = true, args = ["point", "landmark"])]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    /// Template pixel, comma separated per active axis.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub point: Option<Vec<f64>>,
    /// Named template landmark, or `all`.
    #[arg(long)]
    pub landmark: Option<String>,
    #[arg(long, required = true)]
    pub query: Vec<PathBuf>,
    #[arg(long, default_value_t = anatembed::infer::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value = "combined")]
    pub variant: String,
    #[arg(long, value_delimiter = ',')]
    pub tile: Vec<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidate templates; the one closest to the mean landmarks is used.
    #[arg(long)]
    pub template_dir: PathBuf,
    #[arg(long)]
    pub query_dir: PathBuf,
    /// `combined`, `global-only`, `local-only` or `all`.
    #[arg(long, default_value = "combined")]
    pub variant: String,
    /// Output directory.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub box_half_width: f64,
    #[arg(long, value_delimiter = ',')]
    pub tile: Vec<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    pub report: PathBuf,
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    let result = commands::init_threads().and_then(|_| match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Match(a) => commands::match_points(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<anatembed::Error>())
                .map_or("cli", |c| c.kind());
            fail(kind, &format!("{e:#}"))
        }
    }
}
