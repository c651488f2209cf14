//! Command-line driver: `quantred <describe|strata|gram|density|unitarity|consistency|run> --config PATH`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quantred::cli_runner::{describe, load, run, Overrides, Quantities, Scenario};

#[derive(Parser)]
#[command(name = "quantred", version, about = "Quantization and reduction numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the scenario's `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed (overrides the scenario's `seed`).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Comma-separated quantity groups for `run`
    /// (strata, gram, density, residual, unitarity, consistency).
    #[arg(long, global = true, value_name = "QUANTITY[,..]", value_delimiter = ',')]
    only: Option<Vec<String>>,
    /// Comma-separated tensor powers (overrides the scenario's `k_list`).
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    k: Option<Vec<u32>>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Print dimensions, strata and predicted limits without heavy computation.
    Describe,
    /// Write the stratification report.
    Strata,
    /// Write upstairs and downstairs Gram matrices.
    Gram,
    /// Write density and residual curves.
    Density,
    /// Write unitarity defects.
    Unitarity,
    /// Write the per-stratum norm decomposition check.
    Consistency,
    /// Run every quantity enabled in the scenario (or selected by --only).
    Run,
}

fn config_error(lines: &[String]) -> ExitCode {
    for l in lines {
        eprintln!("config error: {l}");
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.common.config.clone() else {
        return config_error(&["--config PATH is required".into()]);
    };
    let subset = |names: &[&str]| Quantities::only(&names.iter().map(|s| s.to_string()).collect::<Vec<_>>()).expect("known names");
    let only = match cli.command {
        Command::Run => match &cli.common.only {
            Some(names) => match Quantities::only(names) {
                Ok(q) => Some(q),
                Err(e) => return config_error(&[e]),
            },
            None => None,
        },
        _ if cli.common.only.is_some() => {
            return config_error(&["--only applies to the run subcommand".into()]);
        }
        Command::Describe => None,
        Command::Strata => Some(subset(&["strata"])),
        Command::Gram => Some(subset(&["gram"])),
        Command::Density => Some(subset(&["density", "residual"])),
        Command::Unitarity => Some(subset(&["unitarity"])),
        Command::Consistency => Some(subset(&["consistency"])),
    };
    let overrides = Overrides { seed: cli.common.seed, k_list: cli.common.k.clone(), output_dir: cli.common.out.clone(), only };
    let scenario: Scenario = match load(&config, &overrides) {
        Ok(s) => s,
        Err(issues) => return config_error(&issues.iter().map(|i| i.to_string()).collect::<Vec<_>>()),
    };
    if cli.command == Command::Describe {
        return match describe(&scenario) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        };
    }
    match run(&scenario) {
        Ok(manifest) => {
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            for f in &manifest.files {
                println!("{}  {}", f.sha256, scenario.output_dir.join(&f.file).display());
            }
            println!("manifest: {}", scenario.output_dir.join("run_manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
