use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "uvmakeup",
    version,
    about = "UV-space makeup transfer on synthetic 3D faces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with clean ground truth.
    Synth(SynthArgs),
    /// Train the generator and discriminators.
    Train(TrainArgs),
    /// Transfer makeup from a reference face onto a source face.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval(EvalArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub n_makeup: usize,
    #[arg(long, default_value_t = 32)]
    pub n_plain: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Config file supplying resolution, image size and dataset settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub fam_off: bool,
    #[arg(long)]
    pub mtm_off: bool,
    /// Total step count, overriding the config.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionArg {
    Lips,
    Eye,
    Face,
    All,
    None,
}

#[derive(clap::Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source face: a PNG with a same-named `.txt` coefficients file, or a
    /// coefficients file alone (rendered from the model texture).
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Shade weight in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    #[arg(long, value_enum, default_value_t = RegionArg::All)]
    pub region: RegionArg,
    /// Second reference for makeup interpolation.
    #[arg(long)]
    pub interp_ref2: Option<PathBuf>,
    /// Weight of the first reference when interpolating.
    #[arg(long, default_value_t = 0.5)]
    pub interp_w: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Checkpoint of a model trained with the flip-attention module off.
    #[arg(long)]
    pub fam_off_ckpt: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
