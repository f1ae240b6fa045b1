//! `purekit` — train, attack, defend, and evaluate from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid configuration, 3 runtime
//! failure (missing or corrupt files, diverged training, I/O).

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn missing_file(path: &std::path::Path, cause: &str) -> Self {
        CliError::Runtime(format!("missing or unreadable file {path:?}: {cause}"))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<purekit_core::Error> for CliError {
    fn from(e: purekit_core::Error) -> Self {
        use purekit_core::Error as E;
        match &e {
            E::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "purekit",
    version,
    about = "Diffusion purification against adversarial attacks: data, training, attacks, defenses, reports",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every component derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (also settable via PUREKIT_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset file.
    GenData(GenDataArgs),
    /// Train the vanilla classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train the diffusion noise predictor.
    TrainDiffusion(TrainDiffusionArgs),
    /// Adversarially train a robust classifier (min-max).
    AdvTrain(AdvTrainArgs),
    /// Craft a PGD adversarial batch and write it with a manifest.
    Attack(AttackArgs),
    /// Standard/robust accuracy for each configured defense.
    Eval(EvalArgs),
    /// Purification accuracy across a grid of noise levels.
    Sweep(SweepArgs),
    /// Dump clean/adversarial/noised/purified PNGs for one example.
    DumpImages(DumpImagesArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct DataFlags {
    /// Sample count (even; classes are exactly balanced).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    center_size: Option<usize>,
    #[arg(long)]
    lesion_radius_min: Option<f32>,
    #[arg(long)]
    lesion_radius_max: Option<f32>,
    #[arg(long)]
    lesion_amplitude: Option<f32>,
    #[arg(long)]
    background_base: Option<f32>,
    #[arg(long)]
    background_contrast: Option<f32>,
    #[arg(long)]
    background_smoothing: Option<f32>,
    #[arg(long)]
    placement_margin: Option<f32>,
    /// Train/val/test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default, Clone)]
struct AttackFlags {
    /// L-infinity radius in [0, 1) pixel units.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    attack_steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    random_start: Option<bool>,
}

#[derive(Args, Debug, Default, Clone)]
struct ScheduleFlags {
    /// Diffusion steps T.
    #[arg(long)]
    num_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataFlags,
    /// Dataset file to write (default <out_dir>/dataset.pkd).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Checkpoint to write (default <out_dir>/classifier.pkc).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainDiffusionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Base channel width of the U-Net.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    time_dim: Option<usize>,
    #[command(flatten)]
    schedule: ScheduleFlags,
    /// Checkpoint to write (default <out_dir>/diffusion.pkc).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdvTrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Validation samples used for the per-epoch accuracy curves.
    #[arg(long)]
    val_subset: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
    /// Checkpoint to write (default <out_dir>/adv_classifier.pkc).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Vanilla classifier checkpoint.
    #[arg(long)]
    classifier: PathBuf,
    /// Number of test samples to attack.
    #[arg(long)]
    n_test: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Diffusion checkpoint; required when the purify defense is evaluated.
    #[arg(long)]
    diffusion: Option<PathBuf>,
    /// Adversarially trained checkpoint; required for adv_trained.
    #[arg(long)]
    adv_classifier: Option<PathBuf>,
    /// Noise level shared by the noise and purify defenses.
    #[arg(long)]
    t: Option<f64>,
    /// Comma-separated defense kinds (none,noise,purify,adv_trained).
    #[arg(long, value_delimiter = ',')]
    defenses: Option<Vec<String>>,
    #[arg(long)]
    n_test: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    diffusion: PathBuf,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Validation samples evaluated per grid point.
    #[arg(long)]
    subset: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args, Debug)]
struct DumpImagesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    diffusion: PathBuf,
    /// Test-split index of the example to dump.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    t: Option<f64>,
    #[command(flatten)]
    attack: AttackFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered help/usage text, but with our exit-code scheme.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {}", e.category(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::RunConfig::load(path)?,
        None => config::RunConfig::default(),
    };
    if let Ok(dir) = std::env::var("PUREKIT_OUT_DIR") {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    match cli.command {
        Command::GenData(args) => commands::gen_data(cfg, args),
        Command::TrainClassifier(args) => commands::train_classifier(cfg, args),
        Command::TrainDiffusion(args) => commands::train_diffusion(cfg, args),
        Command::AdvTrain(args) => commands::adv_train(cfg, args),
        Command::Attack(args) => commands::attack(cfg, args),
        Command::Eval(args) => commands::eval(cfg, args),
        Command::Sweep(args) => commands::sweep(cfg, args),
        Command::DumpImages(args) => commands::dump_images(cfg, args),
    }
}
