use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erm_asymptotics::cli::{cmd_compare, cmd_simulate, cmd_spectrum, cmd_theory, Report};
use erm_asymptotics::config::RunConfig;
use erm_asymptotics::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_GATE: u8 = 3;

#[derive(Parser)]
#[command(version, about = "Asymptotic predictions and finite-n experiments for convex multi-index ERM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the critical-point system over an (alpha, lambda) grid.
    Theory,
    /// Predicted Hessian spectral densities.
    Spectrum,
    /// Finite-n ERM experiments.
    Simulate,
    /// Join theory and simulation outputs and check tolerance gates.
    Compare,
}

fn run(cli: &Cli) -> Result<Report, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "a configuration file is required".into(),
    })?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Argument(e.to_string()))?;
    match cli.command {
        Command::Theory => cmd_theory(&cfg, &cli.out),
        Command::Spectrum => cmd_spectrum(&cfg, &cli.out),
        Command::Simulate => cmd_simulate(&cfg, &cli.out),
        Command::Compare => cmd_compare(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            for v in &report.violations {
                eprintln!("gate: {v}");
            }
            if !report.violations.is_empty() {
                return ExitCode::from(EXIT_GATE);
            }
            if report.failed_cells > 0 {
                eprintln!("{} cells failed numerically", report.failed_cells);
                return ExitCode::from(EXIT_NUMERICAL);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}
