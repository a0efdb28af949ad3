//! `periodic-mdp`: run, plot, sweep and oracle subcommands.
//!
//! Exit codes: 0 on success, 1 when a run or oracle fails, 2 for unusable
//! input (missing or invalid configuration, malformed ledgers, bad flags).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use periodic_mdp_core::algorithms::Framework;
use periodic_mdp_core::environments::Preset;
use periodic_mdp_core::harness::{
    self, OracleSizes, RunConfig, RunOverrides, SweepGrid, SUMMARY_FILE,
};
use periodic_mdp_core::Error;

#[derive(Parser)]
#[command(name = "periodic-mdp", version, about = "Reset-free periodic online learning in tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learner and write ledger.csv, config.resolved and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoint.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Chart cumulative regret of one or more ledgers.
    Plot {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Run every point of a grid and write summary.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// TOML file with any of: seeds, episodes, eta, gamma, noise, frameworks.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run the brute-force oracles and print their tables.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smaller instance counts.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// k, u or baseline.
    #[arg(long, value_parser = parse_framework)]
    framework: Option<Framework>,
    /// max-entropy, obstacles, max-entropy-small or obstacles-small.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
}

fn parse_framework(s: &str) -> Result<Framework, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply(&RunOverrides {
            seed: self.seed,
            episodes: self.episodes,
            out: self.out.clone(),
            framework: self.framework,
            preset: self.preset,
        });
        config.validate()?;
        Ok(config)
    }
}

/// Input problems exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Schema { .. } | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, resume } => {
            let config = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::run(&config, resume) {
                Ok(s) => {
                    println!("episodes: {}", s.episodes);
                    println!("final cumulative regret: {}", s.final_regret);
                    println!("mean last-decile rho_gap: {}", s.last_decile_rho_gap);
                    println!("log-log regret slope (last half): {}", s.loglog_slope);
                    println!("output: {}", s.out_dir.display());
                    ExitCode::SUCCESS
                }
                // Solver failures carry the episode index in their message.
                Err(e) => fail(e),
            }
        }
        Command::Plot { ledgers, out } => match harness::plot_ledgers(&ledgers, &out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Sweep { common, grid } => {
            let config = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let grid = match SweepGrid::load(&grid) {
                Ok(g) => g,
                Err(e) => return fail(e),
            };
            let out = config.output.dir.clone();
            match harness::sweep(&config, &grid, &out) {
                Ok(rows) => {
                    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
                    println!("{} runs, {failed} failed", rows.len());
                    println!("summary: {}", out.join(SUMMARY_FILE).display());
                    if failed > 0 {
                        ExitCode::FAILURE
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Oracle { seed, quick } => {
            let sizes = if quick { OracleSizes::quick() } else { OracleSizes::full() };
            match harness::oracle_tables(sizes, seed) {
                Ok(tables) => {
                    for t in &tables {
                        println!("{}", t.render());
                    }
                    if tables.iter().all(|t| t.passed) {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
    }
}
