use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use relaystore::trace::{read_jsonl, write_jsonl};
use relaystore::{replay, ClusterConfig};
use relaystore_bench::{Ctx, ScenarioRegistry};

#[derive(Parser)]
#[command(name = "bench", about = "Run relaystore scenarios and check traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write one CSV row per trial.
    Run {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a representative trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the scenario's trial count.
        #[arg(long)]
        trials: Option<u32>,
    },
    /// Re-check the structural invariants of a recorded trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// The trace comes from a non-exclusive sender policy.
        #[arg(long)]
        shared_senders: bool,
    },
    /// List the registered scenarios.
    List,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, config, seed, out, trace, trials } => {
            let cfg = ClusterConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let registry = ScenarioRegistry::builtin();
            let outcome = registry.run(&scenario, &Ctx { cfg, seed, trials })?;
            outcome.write_csv(BufWriter::new(File::create(&out)?))?;
            if let Some(path) = trace {
                write_jsonl(&outcome.trace, BufWriter::new(File::create(path)?))?;
            }
            for line in outcome.summary() {
                println!("{line}");
            }
            Ok(outcome.passed())
        }
        Command::Replay { trace, shared_senders } => {
            let records = read_jsonl(BufReader::new(File::open(&trace)?))?;
            let report = replay::check(&records, !shared_senders);
            println!(
                "{} records: {} grants, {} chunks, {} reduces, {} invalidations",
                records.len(),
                report.grants,
                report.chunks,
                report.reduces,
                report.invalidations
            );
            for v in &report.violations {
                println!("AssertionFailed {}: {} (t={}ns, {})", v.invariant, v.detail, v.t, v.node);
            }
            Ok(report.is_clean())
        }
        Command::List => {
            for name in ScenarioRegistry::builtin().names() {
                println!("{name}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
