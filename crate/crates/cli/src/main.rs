use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zeropp_cli::commands::{self, Report};
use zeropp_cli::{Result, RunConfig};

/// Simulate ZeRO++ communication, quantization, training and memory.
#[derive(Parser)]
#[command(name = "zeropp", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory for CSV and JSON reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Set a dotted config key, e.g. `topology.nodes=2`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Cross-node volume of each optimization against the baseline.
    Volume,
    /// Quantization error of blocked and full-tensor codecs.
    QuantBench,
    /// Toy-model training for the baseline and ZeRO++ variants.
    Train,
    /// Pipelined gradient reduce-scatter time over stage counts.
    Latency,
    /// Per-device memory of DP, ZeRO-3, hpZ and MiCS.
    Memory,
}

fn run(cli: &Cli) -> Result<Report> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        // a TOML string literal so paths with spaces or quotes survive
        overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Volume => commands::volume(&cfg),
        Command::QuantBench => commands::quant_bench(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Latency => commands::latency(&cfg),
        Command::Memory => commands::memory(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            // a closed pipe (`zeropp ... | head`) is not a failure
            let mut out = io::stdout().lock();
            let _ = report
                .lines
                .iter()
                .try_for_each(|l| writeln!(out, "{l}"))
                .and_then(|_| {
                    report
                        .files
                        .iter()
                        .try_for_each(|f| writeln!(out, "wrote {}", f.display()))
                });
            if report.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("zeropp: checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("zeropp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
