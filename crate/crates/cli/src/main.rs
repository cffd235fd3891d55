use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qgs_cli::commands::{cmd_analyze, cmd_calibrate, cmd_precision, cmd_run, precision_summary, AnalyzeInputs};
use qgs_cli::{CliError, ExperimentConfig};

/// Deterministic simulator of a QKD ground-station timing chain.
#[derive(Parser)]
#[command(name = "qgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Code-density calibration of every TDC channel.
    Calibrate {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Two-channel cable-delay precision test over the configured pairs.
    Precision {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Full BB84 session: link, TDC, readout, time-tag file and analysis.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also write the matched pairs of the primary window.
        #[arg(long)]
        dump_pairs: bool,
    },
    /// Re-run the analysis over a time-tag file and Alice's sidecar.
    Analyze {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        timetag: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        /// Comma-separated coincidence windows in ps.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<f64>>,
        /// Write the CSV here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Calibrate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", cmd_calibrate(&cfg, out.as_deref())?.summary);
        }
        Command::Precision { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", precision_summary(&cmd_precision(&cfg, out.as_deref())?));
        }
        Command::Run { config, out, dump_pairs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = cmd_run(&cfg, out.as_deref(), dump_pairs)?;
            print!("{}", r.summary);
            println!("artifacts in {}", r.dir.display());
        }
        Command::Analyze { config, timetag, sidecar, windows, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, csv) = cmd_analyze(&cfg, &AnalyzeInputs { timetag: &timetag, sidecar: &sidecar, windows })?;
            match out {
                Some(p) => std::fs::write(&p, csv)
                    .map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qgs: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
