mod commands;
mod pairs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advinpaint", version, about = "Adversarial inpainting patches against face-embedding models")]
struct Cli {
    /// Run configuration (`key = value` text); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective run configuration.
    Config,
    /// Render a synthetic identity dataset.
    GenData(GenData),
    /// Train the face-recognition surrogate.
    TrainFr(TrainFr),
    /// Train the stage-1 adversarial generator.
    TrainStage1(TrainStage1),
    /// Train the stage-2 refiner on top of a stage-1 checkpoint.
    TrainStage2(TrainStage2),
    /// Patch one source image towards a target identity.
    Attack(Attack),
    /// Pick a verification threshold on held-out pairs.
    Calibrate(Calibrate),
    /// Write a pair-list file of cross-identity validation pairs.
    MakePairs(MakePairs),
    /// Attack every pair in a pair list and report success and stealth.
    Evaluate(Evaluate),
    /// ASR over the τ grid as CSV.
    Curve(Evaluate),
    /// Data, FR, both stages and evaluation in one go.
    Pipeline(Pipeline),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    per_identity: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFr {
    /// Dataset root (`<root>/<identity>/<image>.png`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStage1 {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStage2 {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fr: PathBuf,
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Attack {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Patch rectangle in pixels, `L,T,R,B`, inclusive.
    #[arg(long)]
    rect: String,
    #[arg(long)]
    ckpt1: PathBuf,
    #[arg(long)]
    ckpt2: Option<PathBuf>,
    /// Face model used as identity encoder and for the reported similarity.
    #[arg(long)]
    fr: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Calibrate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use every image instead of only the held-out split.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct MakePairs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw from every image instead of only the held-out split.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    ckpt1: PathBuf,
    #[arg(long)]
    ckpt2: Option<PathBuf>,
    /// White-box face model.
    #[arg(long)]
    fr: PathBuf,
    /// Threshold for the white-box model.
    #[arg(long, conflicts_with = "calibration")]
    tau: Option<f64>,
    /// Calibration JSON written by `calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Extra black-box face models, `NAME=CKPT:TAU`.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pipeline {
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return commands::report(&commands::CliError::Usage(e.to_string().trim().to_string())),
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report(&e),
    }
}
