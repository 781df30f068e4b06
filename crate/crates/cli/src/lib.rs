//! `strokeforge` command-line driver. Every subcommand writes its outputs
//! under `--out`; exit codes are 0 on success, 1 for invalid invocations or
//! inputs and 2 for failures after the inputs were accepted.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod overlay;
pub mod report;

pub use error::{CliError, CliResult, EXIT_INTERNAL, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "strokeforge", version, about = "Stroke lesion segmentation from CT perfusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic perfusion phantom set, one directory per case.
    PhantomGen(PhantomGenArgs),
    /// Time-density curves, detected time points and sampled frames per case.
    Preprocess(PreprocessArgs),
    /// Cross-validated training with per-fold checkpoints and overlays.
    Train(TrainArgs),
    /// Run a checkpoint on case directories.
    Infer(InferArgs),
    /// Dice of predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of every differentiable building block.
    Gradcheck(GradcheckArgs),
    /// Cross-validate several variants and check their Dice ordering.
    Ablate(AblateArgs),
}

/// Overrides named exactly like the configuration keys they replace.
/// Precedence: configuration file, then `STROKEFORGE_SEED`, then flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long = "seed")]
    pub seed: Option<u64>,
    /// Also rescales the learning-rate milestones.
    #[arg(long = "total_epochs")]
    pub total_epochs: Option<usize>,
    #[arg(long = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long = "folds")]
    pub folds: Option<usize>,
    #[arg(long = "base_lr")]
    pub base_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Phantom specification (TOML); defaults apply to absent keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "n_cases")]
    pub n_cases: Option<usize>,
    #[arg(long = "seed")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of case directories.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration (TOML); desk defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of segonly, gen, full; resets the input layout to its default.
    #[arg(long = "variant")]
    pub variant: Option<String>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Case directory; repeat for several cases.
    #[arg(long, required = true)]
    pub case: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory with one `<case>/mask.sfv` per predicted case.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory with one `<case>/mask.sfv` per ground-truth case.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the boundary weight map of every truth mask.
    #[arg(long = "dump-heatmaps")]
    pub dump_heatmaps: bool,
    /// Configuration supplying the weight-map parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long = "seed", default_value_t = 0)]
    pub seed: u64,
    /// Optional directory for a JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "segonly,gen,full")]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .try_init();
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
