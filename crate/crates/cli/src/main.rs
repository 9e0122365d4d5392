use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use orthokit::OrthoError;

mod commands;
mod io;

/// Orthogonalize model predictions with respect to protected features and
/// check the result with evaluation models.
#[derive(Parser, Debug)]
#[command(name = "orthokit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a corrected prediction model on a CSV file.
    Correct(CorrectArgs),
    /// Regress predictions on protected features and report the influence.
    Evaluate(EvaluateArgs),
    /// Run a simulation study over a grid of synthetic settings.
    Simulate(SimulateArgs),
    /// Reproduce the optimization-path or online-training demonstration.
    Demo(DemoArgs),
}

/// MDMM overrides shared by the commands that fit constrained models.
#[derive(Args, Debug, Clone)]
pub struct MdmmArgs {
    /// Step size of the multiplier method.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the quadratic constraint penalty.
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// Constraint tolerance for convergence.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Step preconditioner (gauss-newton or gradient).
    #[arg(long)]
    pub preconditioner: Option<String>,
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Outcome column; not used by the tensor method.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Protected columns, comma separated. Non-numeric columns are one-hot
    /// encoded without their lexicographically first level.
    #[arg(long, value_delimiter = ',', required = true)]
    pub protected: Vec<String>,
    /// Feature columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    /// uncorrected, linear, glm-constrained, relu or tensor.
    #[arg(long, default_value = "glm-constrained")]
    pub method: String,
    /// Tensor file (`#dims` header) for the tensor method.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mdmm: MdmmArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Prediction column; defaults to `y_hat_corrected` or the last column.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long = "protected-data")]
    pub protected_data: PathBuf,
    /// Protected columns; defaults to every column except `row_id`.
    #[arg(long, value_delimiter = ',')]
    pub protected: Option<Vec<String>>,
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    /// Use the ReLU least-squares evaluation model instead of a GLM.
    #[arg(long)]
    pub relu: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON grid file or a preset (standard-bernoulli, standard-poisson).
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 10)]
    pub replicates: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mdmm: MdmmArgs,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// paths or online.
    #[arg(long)]
    pub which: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training epochs for the online demo.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn configure_threads() {
    let Ok(raw) = std::env::var("ORTHOKIT_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("could not size the thread pool: {e}");
            }
        }
        _ => warn!("ignoring ORTHOKIT_THREADS={raw:?}: expected a positive integer"),
    }
}

/// 3 for numerical non-convergence, 2 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<OrthoError>() {
        Some(
            OrthoError::DidNotConverge { .. }
            | OrthoError::ConstrainedDidNotConverge(_)
            | OrthoError::SingularInformation,
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Correct(a) => commands::correct(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Demo(a) => commands::demo(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
