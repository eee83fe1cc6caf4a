//! `ntnsim` command line: single runs, estimator and attenuation tables, and
//! parameter sweeps. Every command writes CSV files plus a `manifest.txt`.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 when the
//! run itself fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ntnsim::experiments::{run_to_dir, sweep, write_attenuation, write_nmse, SweepAxis};
use ntnsim::sim::SimConfig;
use ntnsim::Error;

/// Default output root when `--out` is not given.
const OUTPUT_ENV: &str = "NTNSIM_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "ntnsim-out";

#[derive(Debug, Parser)]
#[command(name = "ntnsim", version, about = "Sensing-assisted multi-band satellite network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured horizon and write the metrics archive.
    Run(Common),
    /// Monte-Carlo accuracy of the SNR and attenuation estimators.
    Nmse(Common),
    /// Rain attenuation over intensity and elevation.
    Attenuation(Common),
    /// Repeat the run over one parameter axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// quota, pilot, band_mode or ra_mode
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `dotted.key=value` override, may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory. Defaults to `$NTNSIM_OUTPUT_DIR/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    SweepAxis::parse(s).ok_or_else(|| format!("unknown axis `{s}`, expected quota, pilot, band_mode or ra_mode"))
}

impl Common {
    fn load(&self) -> ntnsim::Result<SimConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ntnsim::config::load(&self.config, &overrides)
    }

    fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT), PathBuf::from);
            root.join(command)
        })
    }
}

fn execute(cmd: &Command) -> ntnsim::Result<PathBuf> {
    match cmd {
        Command::Run(c) => {
            let cfg = c.load()?;
            let dir = c.out_dir("run");
            let (archive, _) = run_to_dir(&dir, &cfg)?;
            let s = archive.summary();
            println!(
                "mean per-user throughput {:.4e} bps, unmatched fraction {:.4}",
                s.mean_user_throughput_bps, s.unmatched_fraction
            );
            Ok(dir)
        }
        Command::Nmse(c) => {
            let cfg = c.load()?;
            let dir = c.out_dir("nmse");
            write_nmse(&dir, &cfg)?;
            Ok(dir)
        }
        Command::Attenuation(c) => {
            let cfg = c.load()?;
            let dir = c.out_dir("attenuation");
            write_attenuation(&dir, &cfg)?;
            Ok(dir)
        }
        Command::Sweep { common, axis } => {
            let cfg = common.load()?;
            let dir = common.out_dir("sweep");
            let result = sweep(&dir, &cfg, *axis)?;
            for (label, s) in &result.points {
                println!(
                    "{} = {label}: mean {:.4e} bps, unmatched {:.4}",
                    axis.name(),
                    s.mean_user_throughput_bps,
                    s.unmatched_fraction
                );
            }
            Ok(dir.join(axis.name()))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("output: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
