//! `qtwin` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qtwin_core::sim::compare::{compare, metric_rows, write_metric_rows, write_summary, RunResult};
use qtwin_core::sim::{read_trace, run_scenario, write_trace, ControllerKind, MetricsSummary, Payload, SimConfig};

#[derive(Parser)]
#[command(name = "qtwin", version, about = "Digital twin of a quantum-secured fiber/FSO/LEO industrial network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file without running it.
    Validate { config: PathBuf },
    /// Run one scenario and write its trace and metrics.
    Run {
        config: PathBuf,
        /// Seed; defaults to the `seed` in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario controller.
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several controllers over a seed range and tabulate metrics.
    Compare {
        config: PathBuf,
        /// Comma-separated controller names.
        #[arg(long, value_delimiter = ',', required = true)]
        controllers: Vec<ControllerKind>,
        /// Inclusive range `N..M` or a comma-separated list.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the metrics summary from a trace file.
    Metrics { trace: PathBuf },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("ok: {} ({} sites, {} satellites)", cfg.name, cfg.sites.len(), cfg.constellation.total());
            Ok(())
        }
        Command::Run { config, seed, controller, out } => {
            let mut cfg = load(&config)?;
            if let Some(c) = controller {
                cfg.controller = c;
            }
            let seed = seed.unwrap_or(cfg.seed);
            let output = run_scenario(&cfg, seed).map_err(|e| runtime(e.to_string()))?;
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            let file = create(&out.join("trace.jsonl"))?;
            write_trace(&output.trace, std::io::BufWriter::new(file)).map_err(|e| runtime(e.to_string()))?;
            let run = RunResult { controller: cfg.controller, seed, metrics: output.metrics.clone() };
            write_metric_rows(&metric_rows(&[run]), create(&out.join("metrics.csv"))?)
                .map_err(|e| runtime(e.to_string()))?;
            let json = summary_json(&output.metrics)?;
            fs::write(out.join("summary.json"), &json).map_err(|e| runtime(e.to_string()))?;
            print!("{json}");
            Ok(())
        }
        Command::Compare { config, controllers, seeds, out } => {
            let cfg = load(&config)?;
            let seeds = parse_seeds(&seeds).map_err(usage)?;
            let result = compare(&cfg, &controllers, &seeds).map_err(|e| runtime(e.to_string()))?;
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            write_metric_rows(&metric_rows(&result.runs), create(&out.join("runs.csv"))?)
                .map_err(|e| runtime(e.to_string()))?;
            write_summary(&result.summary, create(&out.join("comparison.csv"))?).map_err(|e| runtime(e.to_string()))?;
            let stdout = std::io::stdout();
            write_summary(&result.summary, stdout.lock()).map_err(|e| runtime(e.to_string()))?;
            Ok(())
        }
        Command::Metrics { trace } => {
            let file = fs::File::open(&trace).map_err(|e| usage(format!("{}: {e}", trace.display())))?;
            let records = read_trace(BufReader::new(file)).map_err(|e| usage(e.to_string()))?;
            let metrics = qtwin_core::sim::compute_metrics(&records);
            let json = summary_json(&metrics)?;
            let recorded = records.iter().rev().find_map(|r| match &r.payload {
                Payload::Summary { metrics } => Some(metrics),
                _ => None,
            });
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(json.as_bytes()).map_err(|e| runtime(e.to_string()))?;
            match recorded {
                Some(m) if summary_json(m)? != json => Err(runtime("recomputed metrics differ from the recorded summary")),
                _ => Ok(()),
            }
        }
    }
}

fn load(path: &Path) -> Result<SimConfig, Failure> {
    let cfg = SimConfig::load(path).map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<fs::File, Failure> {
    fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn summary_json(m: &MetricsSummary) -> Result<String, Failure> {
    serde_json::to_string_pretty(m).map(|s| s + "\n").map_err(|e| runtime(e.to_string()))
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("invalid seed list {text:?}; expected N..M or a comma-separated list");
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds: Vec<u64> = text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
