use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use macs_core::config::parse_config;
use macs_core::report::{cmd_calibrate, cmd_run, cmd_sweep, parse_values, SweepAxis};
use macs_core::{Error, Result, RunConfig};

/// Capacity-managed MoE routing simulator.
#[derive(Parser)]
#[command(name = "macs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate, dispatch every configured policy and write the run report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run one parameter over a list of values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// gamma0, rho or delta_semantic.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, at least two.
        #[arg(long)]
        values: String,
    },
    /// Write the expert calibration document.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let config = load(&config)?;
            let artifacts = cmd_run(&config)?;
            let r = &artifacts.report;
            println!("R_v = {}, C_base = {}", r.r_v, r.c_base);
            println!("{:<16}{:>10}{:>10}{:>10}{:>10}{:>10}", "policy", "drop", "reroute", "max", "total", "speedup");
            for m in &r.policies {
                println!(
                    "{:<16}{:>10.4}{:>10.4}{:>10}{:>10.2}{:>10.3}",
                    m.policy.as_str(),
                    m.drop_rate,
                    m.reroute_rate,
                    m.imbalance.max,
                    m.latency.total,
                    m.speedup_vs_vanilla
                );
            }
            println!("outputs written to {}", config.output.dir);
        }
        Command::Sweep { config, axis, values } => {
            let config = load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let values = parse_values(&values)?;
            print!("{}", cmd_sweep(&config, axis, &values)?);
        }
        Command::Calibrate { config } => {
            let config = load(&config)?;
            let out = cmd_calibrate(&config)?;
            println!("{}", out.memory_line);
            println!("calibration written to {}/calibration.json", config.output.dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as validation failures; 2 is reserved for I/O.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
