//! `propnp` command-line front end.

mod commands;
mod plot;
mod schema;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "PROPNP_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input (exit 1).
    Input(String),
    /// Numerical or degeneracy failure (exit 2).
    Numerical(String),
    /// Training stopped on a non-finite loss or gradient (exit 3).
    Abort { step: usize, dump: PathBuf },
}

impl CliError {
    pub fn core(context: &str, e: propnp::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(format!("{context}: {e}"))
        } else {
            CliError::Input(format!("{context}: {e}"))
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Abort { .. } => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Abort { step, dump } => {
                write!(f, "training aborted: non-finite loss or gradient at step {step}; state written to {}", dump.display())
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "propnp", version, about = "Probabilistic PnP: solve, sample, evaluate losses, train a toy learner")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for the most likely pose and its covariance.
    Solve {
        scene: PathBuf,
        /// Start LM from the pose of a previous `solve` output instead of random sampling.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Draw posterior samples by adaptive multiple importance sampling.
    Sample {
        scene: PathBuf,
        /// Samples per AMIS iteration.
        #[arg(long)]
        samples: Option<usize>,
        /// CSV file receiving one row per sample.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the KL pose loss and its gradients at the scene's gt pose.
    Loss {
        scene: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Add the derivative regularization loss with this weight.
        #[arg(long)]
        reg_weight: Option<f64>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck { scene: PathBuf },
    /// Train the toy correspondence learner.
    Toytrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for trace.csv, params.json and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and error curves of a training trace as SVG.
    Plot {
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Input(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("{THREADS_ENV}: {e}")))
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    init_threads()?;
    match cli.cmd {
        Cmd::Solve { scene, init } => commands::solve(&scene, init.as_deref(), cli.seed),
        Cmd::Sample { scene, samples, out } => commands::sample(&scene, samples, out.as_deref(), cli.seed),
        Cmd::Loss { scene, samples, reg_weight } => commands::loss(&scene, samples, reg_weight, cli.seed),
        Cmd::Gradcheck { scene } => commands::gradcheck(&scene),
        Cmd::Toytrain { config, out } => commands::toytrain(&config, &out, cli.seed),
        Cmd::Plot { trace, out } => commands::plot(&trace, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.stdout);
            ExitCode::from(out.code as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
