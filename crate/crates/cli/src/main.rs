use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csqpt_cli::{AnalyzeMode, AnalyzeOptions, CliError, ReconstructOptions, RunConfig};

#[derive(Parser)]
#[command(name = "csqpt", version, about = "Coherent-state process tomography of heralded photon addition and subtraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Diag,
    Fidelity,
    Rates,
    Wigner,
}

impl From<Mode> for AnalyzeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Diag => AnalyzeMode::Diag,
            Mode::Fidelity => AnalyzeMode::Fidelity,
            Mode::Rates => AnalyzeMode::Rates,
            Mode::Wigner => AnalyzeMode::Wigner,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset per probe amplitude plus a herald-rate summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Reconstruct the process tensor from a dataset directory.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit with unit herald weights (debugging ablation).
        #[arg(long)]
        no_herald_norm: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        allow_provenance_mismatch: bool,
    },
    /// Write analysis reports for a tensor file.
    Analyze {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory with `rates.csv` (rates mode).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        allow_provenance_mismatch: bool,
    },
    /// Recover probe amplitudes from unheralded samples.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, workers } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))?;
            let summary = csqpt_cli::with_workers(workers, || csqpt_cli::simulate(&cfg, &out))??;
            log::info!("wrote {} datasets to {}", summary.files.len(), out.display());
        }
        Command::Reconstruct { data, config, out, no_herald_norm, workers, allow_provenance_mismatch } => {
            let cfg = RunConfig::load(&config)?;
            let opts = ReconstructOptions { herald_normalization: !no_herald_norm, workers, allow_provenance_mismatch };
            let r = csqpt_cli::reconstruct(&data, &cfg, opts)?;
            csqpt_cli::write_reconstruction(&r, &out)?;
            log::info!(
                "{} iterations, converged = {}, log-likelihood {}",
                r.result.iterations,
                r.result.converged,
                r.result.final_log_likelihood()
            );
        }
        Command::Analyze { tensor, mode, out, config, data, allow_provenance_mismatch } => {
            let config = config.map(|p| RunConfig::load(&p)).transpose()?;
            let opts = AnalyzeOptions { config, data, allow_provenance_mismatch };
            for p in csqpt_cli::analyze(&tensor, mode.into(), &out, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Calibrate { data, out } => {
            let c = csqpt_cli::calibrate(&data)?;
            csqpt_cli::write_calibration(&c, &out)?;
            log::info!("slope {} intercept {}", c.slope, c.intercept);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
