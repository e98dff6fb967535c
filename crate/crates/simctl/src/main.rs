//! Command-line front end for the agent serving simulator.
//!
//! Subcommands:
//! - `run`: one experiment mode, emitting the per-task latency breakdown,
//!   a text summary, and optionally the event log.
//! - `sweep`: every mode across a list of arrival rates, emitting the
//!   comparison and hit-rate tables.
//! - `validate`: parse and validate a configuration file.
//!
//! The output directory can be overridden with `SIMCTL_OUT_DIR`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use spagent_core::experiment::{run, sweep, Mode};
use spagent_core::summary::SweepTable;
use spagent_core::FileConfig;

#[derive(Parser)]
#[command(
    name = "simctl",
    version,
    about = "Speculative agent serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (SIMCTL_OUT_DIR overrides).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment mode.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// naive | verified-only | spagent-nosched | spagent-full
        #[arg(long)]
        mode: Option<Mode>,
        /// Capture and write the event log of the first replication.
        #[arg(long)]
        log: bool,
    },
    /// Run all modes over a list of arrival rates.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated tasks-per-second rates, e.g. 0.5,1,2,3
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Restrict to a subset of modes (default all four).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
    },
    /// Parse and validate a configuration file.
    Validate {
        /// Configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<(FileConfig, Option<PathBuf>)> {
    match path {
        Some(p) => {
            let cfg = FileConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok((cfg, p.parent().map(Path::to_path_buf)))
        }
        None => Ok((FileConfig::default(), None)),
    }
}

fn out_dir(requested: &Path) -> PathBuf {
    match std::env::var_os("SIMCTL_OUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => requested.to_path_buf(),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, mode, log } => {
            let (file_cfg, base_dir) = load_config(&common.config)?;
            let mut cfg = file_cfg.to_run_config(base_dir.as_deref(), mode, common.seed)?;
            if log {
                cfg.capture_log = true;
            }
            let summary = run(&cfg);
            let dir = out_dir(&common.out);
            summary
                .emit(&dir)
                .with_context(|| format!("writing results to {}", dir.display()))?;
            print!("{}", summary.text_report());
            println!("results written to {}", dir.display());
        }
        Command::Sweep {
            common,
            rates,
            modes,
        } => {
            let (file_cfg, base_dir) = load_config(&common.config)?;
            let cfg = file_cfg.to_run_config(base_dir.as_deref(), None, common.seed)?;
            let modes = if modes.is_empty() {
                Mode::ALL.to_vec()
            } else {
                modes
            };
            let (table, summaries) = sweep(&rates, &cfg, &modes);
            let dir = out_dir(&common.out);
            table
                .emit(&dir)
                .with_context(|| format!("writing results to {}", dir.display()))?;
            for s in &summaries {
                let sub = dir.join(format!("rate_{}", fmt_rate(s.rate.unwrap_or(0.0))));
                s.emit(&sub)?;
            }
            print_sweep(&table);
            println!("results written to {}", dir.display());
        }
        Command::Validate { config } => {
            let cfg = FileConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            cfg.to_run_config(config.parent(), None, None)?;
            println!("ok: {}", config.display());
        }
    }
    Ok(())
}

fn fmt_rate(rate: f64) -> String {
    format!("{rate}").replace('.', "_")
}

fn print_sweep(table: &SweepTable) {
    println!("mode,rate,mean_s,p95_s,hit_rate");
    let mut rows = table.rows.clone();
    rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.rate.total_cmp(&b.rate)));
    for r in rows {
        println!(
            "{},{},{:.4},{:.4},{:.4}",
            r.mode, r.rate, r.mean_s, r.p95_s, r.hit_rate
        );
    }
}
