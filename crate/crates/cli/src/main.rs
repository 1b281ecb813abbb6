//! `pcal`: configuration-driven front end. Every command writes a JSON report and CSV tables
//! into the output directory.
//!
//! Exit codes: 0 success, 2 validation error, 3 failed check, 4 solver or I/O failure.

mod commands;
mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pcal", version, about = "Periodic waveguide inverse-problem experiments")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides PCAL_OUTPUT_DIR and the config.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker count; overrides PCAL_WORKERS and the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Triangulate the cross-section and export the mesh.
    Mesh,
    /// Lowest Dirichlet eigenvalue and the Poincare constant.
    Eig,
    /// Solve the fiber problems for random boundary data on the input face.
    Forward,
    /// Assemble partial DN maps and their differences over the theta-grid.
    Dnmap,
    /// CGO remainders over a tau-ladder.
    Cgo,
    /// Fourier recovery of V2 - V1 on a frequency grid.
    Recover,
    /// Stability ladder V1 + s W.
    Stability,
    /// Conductivity experiments through the Liouville transform.
    Conductivity {
        #[command(subcommand)]
        action: ConductivityAction,
    },
    /// Regenerate the table of analytic and oracle reference values.
    Oracle,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum ConductivityAction {
    /// Admissibility and boundary compatibility of the pair.
    Check,
    /// Boundary-map difference and its weighted bound on each fiber.
    Sigma,
    /// Stability ladder a1 + s * perturbation.
    Stability,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn assertion(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        Failure { code: 4, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::solver(format!("{}: {e}", path.display()))
    }
}

impl From<pcal::Error> for Failure {
    fn from(e: pcal::Error) -> Self {
        let code = match e {
            pcal::Error::Validation(_) | pcal::Error::Format(_) => 2,
            pcal::Error::Assertion(_) => 3,
            pcal::Error::Solver(_) | pcal::Error::Io(_) => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

/// Where reports go and how many workers are recorded, after flag and environment overrides.
pub struct Runtime {
    pub out: PathBuf,
    pub workers: usize,
    pub hash: String,
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>, Failure> {
    match std::env::var(name) {
        Ok(v) => v.parse().map(Some).map_err(|_| Failure::validation(format!("{name}: cannot parse {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let env_out: Option<PathBuf> = env_override("PCAL_OUTPUT_DIR")?;
    let env_workers: Option<usize> = env_override("PCAL_WORKERS")?;
    let loaded = match (&cli.config, cli.command) {
        (Some(p), _) => Some(config::load(p)?),
        (None, Command::Oracle) => None,
        (None, _) => return Err(Failure::validation("--config is required for this command")),
    };
    if let Some(l) = &loaded {
        let errs = l.config.validate();
        if !errs.is_empty() {
            return Err(Failure::validation(format!("invalid configuration:\n  {}", errs.join("\n  "))));
        }
    }
    let out = cli
        .out
        .or(env_out)
        .or_else(|| loaded.as_ref().map(|l| l.config.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let workers = cli.workers.or(env_workers).or_else(|| loaded.as_ref().map(|l| l.config.workers)).unwrap_or(1);
    if workers == 0 {
        return Err(Failure::validation("workers: must be at least 1"));
    }
    std::fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;
    let rt = Runtime { out, workers, hash: loaded.as_ref().map(|l| l.hash.clone()).unwrap_or_default() };
    let cfg = loaded.map(|l| l.config);
    let need = || cfg.as_ref().expect("config checked above");
    let report = match cli.command {
        Command::Mesh => commands::mesh(need(), &rt)?,
        Command::Eig => commands::eig(need(), &rt)?,
        Command::Forward => commands::forward(need(), &rt)?,
        Command::Dnmap => commands::dnmap(need(), &rt)?,
        Command::Cgo => commands::cgo(need(), &rt)?,
        Command::Recover => commands::recover(need(), &rt)?,
        Command::Stability => commands::stability(need(), &rt)?,
        Command::Conductivity { action } => match action {
            ConductivityAction::Check => commands::conductivity_check(need(), &rt)?,
            ConductivityAction::Sigma => commands::conductivity_sigma(need(), &rt)?,
            ConductivityAction::Stability => commands::conductivity_stability(need(), &rt)?,
        },
        Command::Oracle => commands::oracle(cfg.as_ref(), &rt)?,
    };
    let failed = report.failed();
    if failed.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = failed.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        Err(Failure::assertion(format!("failed checks:\n  {}", lines.join("\n  "))))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
