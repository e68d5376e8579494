//! Command-line driver for the assignment-surrogate pipeline. Every
//! subcommand works inside one experiment directory whose manifest tracks
//! stage completion and the config hash each stage ran under.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use assign_surrogate::{Error, Result};

use config::AppConfig;
use manifest::config_hash;
use stages::StageCtx;

pub const WORKERS_ENV: &str = "ASSIGN_SURROGATE_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "assign-surrogate",
    version,
    about = "Generate, simulate, and learn assignment-conditioned traffic surrogates"
)]
struct Cli {
    /// configuration file, JSON or dotted key = value lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// root random seed; all stage seeds derive from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// experiment directory
    #[arg(long, global = true, default_value = "exp", value_name = "DIR")]
    out: PathBuf,
    /// overwrite completed stages and ignore config-hash mismatches
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// road network and hexagonal cells
    Net {
        #[command(subcommand)]
        cmd: NetCmd,
    },
    /// fixed trip demand
    Demand {
        #[command(subcommand)]
        cmd: DemandCmd,
    },
    /// per-trip route choice sets
    Paths {
        #[command(subcommand)]
        cmd: PathsCmd,
    },
    /// route-share sampling plans
    Sample {
        #[command(subcommand)]
        cmd: SampleCmd,
    },
    /// mesoscopic simulation of planned assignments
    Simulate {
        #[command(subcommand)]
        cmd: SimulateCmd,
    },
    /// supervised dataset with train/val/test split
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// train the surrogate
    Train {
        /// train the ablation variant that never reads assignments
        #[arg(long)]
        flow_only: bool,
    },
    /// evaluate a trained surrogate
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// benchmarks
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand, Debug)]
enum NetCmd {
    /// generate the synthetic grid network and its cell map
    Gen {
        /// grid rows, overriding the config
        #[arg(long)]
        rows: Option<usize>,
        /// grid columns, overriding the config
        #[arg(long)]
        cols: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum DemandCmd {
    /// draw agents with origins, destinations, and departure times
    Gen {
        /// number of agents, overriding the config
        #[arg(long)]
        agents: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum PathsCmd {
    /// build k-shortest-path choice sets
    Build {
        /// routes per agent, overriding the config
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum SampleCmd {
    /// plan simulations over the simplex grid of route shares
    Grid {
        /// number of simulations, overriding the config
        #[arg(long)]
        sims: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum SimulateCmd {
    /// simulate every planned assignment
    Batch {
        /// parallel workers (default: ASSIGN_SURROGATE_WORKERS or all cores)
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// assemble runs into a split supervised dataset
    Build,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// travel-time accuracy over the test assignments
    Tt,
    /// per-cell occupancy trace for one run
    Trace {
        /// cell index
        #[arg(long)]
        cell: usize,
        /// run id (default: first test run)
        #[arg(long)]
        run: Option<u64>,
    },
    /// full model vs flow-only ablation
    Ablation,
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// simulator vs surrogate wall-clock comparison
    Speed {
        /// number of scenarios to time
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
}

fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(text) => match text.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::validation(format!(
                "{WORKERS_ENV} must be a positive integer, got `{text}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;

    // flag overrides join the config before it is hashed
    match &cli.cmd {
        Cmd::Net { cmd: NetCmd::Gen { rows, cols } } => {
            if let Some(r) = rows {
                cfg.net.rows = *r;
            }
            if let Some(c) = cols {
                cfg.net.cols = *c;
            }
        }
        Cmd::Demand { cmd: DemandCmd::Gen { agents } } => {
            if let Some(a) = agents {
                cfg.demand.agents = *a;
            }
        }
        Cmd::Paths { cmd: PathsCmd::Build { k } } => {
            if let Some(k) = k {
                cfg.paths.k = *k;
            }
        }
        Cmd::Sample { cmd: SampleCmd::Grid { sims } } => {
            if let Some(s) = sims {
                cfg.sampler.sims = *s;
            }
        }
        _ => {}
    }

    // which model trains is a stage property, not part of the configuration
    // identity, so it is kept out of the hash
    let mut canonical = cfg.clone();
    canonical.train.flow_only = false;
    let snapshot = canonical.snapshot()?;
    let hash = config_hash(&snapshot, cli.seed)?;
    let ctx = StageCtx {
        cfg: &cfg,
        snapshot,
        hash,
        out: &cli.out,
        root_seed: cli.seed,
        force: cli.force,
    };

    match cli.cmd {
        Cmd::Net { cmd: NetCmd::Gen { .. } } => stages::net_gen(&ctx),
        Cmd::Demand { cmd: DemandCmd::Gen { .. } } => stages::demand_gen(&ctx),
        Cmd::Paths { cmd: PathsCmd::Build { .. } } => stages::paths_build(&ctx),
        Cmd::Sample { cmd: SampleCmd::Grid { .. } } => stages::sample_grid(&ctx),
        Cmd::Simulate { cmd: SimulateCmd::Batch { workers } } => {
            let workers = match workers {
                Some(n) => Some(n),
                None => workers_from_env()?,
            };
            stages::simulate_batch(&ctx, workers)
        }
        Cmd::Dataset { cmd: DatasetCmd::Build } => stages::dataset_build(&ctx),
        Cmd::Train { flow_only } => stages::train_model(&ctx, flow_only),
        Cmd::Eval { cmd } => match cmd {
            EvalCmd::Tt => stages::eval_tt(&ctx),
            EvalCmd::Trace { cell, run } => stages::eval_trace(&ctx, cell, run),
            EvalCmd::Ablation => stages::eval_ablation(&ctx),
        },
        Cmd::Bench { cmd: BenchCmd::Speed { samples } } => stages::bench_speed(&ctx, samples),
    }
}

/// Parse and run; returns the process exit code. Validation problems exit 1,
/// runtime failures exit 2, and bad usage prints to stderr and exits 1.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    0
                }
                _ => {
                    eprint!("{err}");
                    1
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Validation(_) => 1,
                _ => 2,
            }
        }
    }
}
