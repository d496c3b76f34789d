use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cflsim_core::config::{load_config, Algo};
use cflsim_core::error::Error;
use cflsim_core::federation::{run_config, ExecOptions};
use cflsim_core::io::{read_records, write_results, RunManifest, SweepGrid, RECORDS_FILE};
use cflsim_core::report::{render, summarize, ReportFormat};
use cflsim_core::sweep::{sweep, threads_from_env};

#[derive(Parser)]
#[command(name = "cflsim", version, about = "Continual federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the algorithm (fedavg, fedprox, fl_ewc, fl_si, fedssi).
        #[arg(long)]
        algo: Option<Algo>,
        /// Write records, summary and manifest here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the lambda x alpha_dir x seed cross product.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        #[arg(long = "alpha-dir", value_delimiter = ',', required = true)]
        alpha_dir: Vec<f64>,
        /// Comma list and/or inclusive ranges, e.g. `1..5` or `1,2,7`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a record directory into mean ± std tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = |part: &str| Error::config("seeds", format!("cannot parse `{part}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
            if b < a {
                return Err(bad(part));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if out.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            algo,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(a) = algo {
                cfg.run.algo = a;
            }
            cfg.validate()?;
            let outcome = run_config(
                &cfg,
                ExecOptions {
                    threads: threads_from_env(),
                },
            )?;
            let rec = outcome.record;
            match out {
                Some(dir) => {
                    let paths = write_results(
                        std::slice::from_ref(&rec),
                        &RunManifest::new(cfg, None),
                        &dir,
                    )?;
                    eprintln!(
                        "{} seed {}: A(f) = {:.4}, avg = {:.4}, forgetting = {:.4} -> {}",
                        rec.algo,
                        rec.seed,
                        rec.final_acc,
                        rec.avg_acc,
                        rec.forgetting,
                        paths.records.display()
                    );
                }
                None => println!("{}", serde_json::to_string(&rec)?),
            }
        }
        Command::Sweep {
            config,
            lambda,
            alpha_dir,
            seeds,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let outcome = sweep(&cfg, &lambda, &alpha_dir, &seeds, threads_from_env())?;
            for f in &outcome.failures {
                eprintln!(
                    "cell alpha_dir={} lambda={} seed={} failed: {}",
                    f.cell.alpha_dir, f.cell.lambda, f.cell.seed, f.error
                );
            }
            let grid = SweepGrid {
                lambdas: lambda,
                alpha_dirs: alpha_dir,
                seeds,
            };
            let paths = write_results(&outcome.records, &RunManifest::new(cfg, Some(grid)), &out)?;
            eprintln!(
                "{} records, {} failures -> {}",
                outcome.records.len(),
                outcome.failures.len(),
                paths.records.display()
            );
            if !outcome.failures.is_empty() {
                return Err(Error::Protocol(format!(
                    "{} sweep cells failed",
                    outcome.failures.len()
                )));
            }
        }
        Command::Report { input, format } => {
            let records = read_records(input.join(RECORDS_FILE))?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Md => ReportFormat::Markdown,
            };
            print!("{}", render(&summarize(&records), format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
