use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use siamlab::cli::config::{parse_assignment, parse_config};
use siamlab::cli::plot::plot_csv;
use siamlab::cli::presets::registry;
use siamlab::cli::runner::{default_out_root, run_preset, sweep, write_sweep_csv};
use siamlab::cli::verify::run_suite;
use siamlab::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "siamlab",
    version,
    about = "Collapse dynamics of Siamese self-supervised learning at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one preset and write its artifacts.
    Run {
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output root; defaults to $SIAMLAB_OUT or ./siamlab-runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Key-value config file, applied before --set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one setting, e.g. `arch.tau=0.5` or `steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run a preset over a grid of one parameter and print a long CSV.
    Sweep {
        preset: String,
        /// One of tau, sigma, ma_momentum, eta.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Render an SVG line plot next to a CSV file.
    Plot {
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<String>,
    },
    /// Run the built-in checks and print a TSV report.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// List presets and their expectations.
    List,
}

enum Outcome {
    Held,
    Violated,
}

fn overrides(config: Option<&PathBuf>, sets: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = match config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    for s in sets {
        pairs.push(parse_assignment(s)?);
    }
    Ok(pairs)
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Run {
            preset,
            seed,
            out,
            config,
            sets,
        } => {
            let pairs = overrides(config.as_ref(), &sets)?;
            let root = out.unwrap_or_else(default_out_root);
            let manifest = run_preset(&preset, seed, &pairs, &root)?;
            print!("{}", manifest.to_text());
            Ok(if manifest.expectation_held() {
                Outcome::Held
            } else {
                Outcome::Violated
            })
        }
        Command::Sweep {
            preset,
            param,
            values,
            seeds,
            output,
            config,
            sets,
        } => {
            let pairs = overrides(config.as_ref(), &sets)?;
            let rows = sweep(&preset, &param, &values, &seeds, &pairs)?;
            match output {
                Some(path) => write_sweep_csv(&rows, &mut std::fs::File::create(path)?)?,
                None => write_sweep_csv(&rows, &mut std::io::stdout().lock())?,
            }
            Ok(Outcome::Held)
        }
        Command::Plot { csv, metrics } => {
            let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
            let svg = plot_csv(&csv, &names)?;
            println!("{}", svg.display());
            Ok(Outcome::Held)
        }
        Command::Verify { suite } => {
            let report = run_suite(&suite)?;
            print!("{}", report.to_tsv());
            Ok(if report.passed() {
                Outcome::Held
            } else {
                Outcome::Violated
            })
        }
        Command::List => {
            let mut out = std::io::stdout().lock();
            for p in registry() {
                let claims: Vec<String> = p.claims.iter().map(|c| c.describe()).collect();
                writeln!(out, "{}\t{}", p.name, claims.join("; "))?;
            }
            Ok(Outcome::Held)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Held) => ExitCode::SUCCESS,
        Ok(Outcome::Violated) => ExitCode::from(1),
        Err(e) => {
            eprintln!("siamlab: {e}");
            let usage = matches!(
                e,
                Error::UnknownPreset(_)
                    | Error::InvalidOverride(_)
                    | Error::InvalidParameter(_)
                    | Error::MissingColumn(_)
            );
            ExitCode::from(if usage { 2 } else { 3 })
        }
    }
}
