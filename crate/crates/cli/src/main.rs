mod config;
mod run;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctsls::plant::CostWeights;

use config::ExperimentConfig;
use run::Outputs;

const CHAIN_PRESET: &str = include_str!("../presets/chain.json");
const GRID_H2_PRESET: &str = include_str!("../presets/grid-h2.json");
const GRID_HINF_PRESET: &str = include_str!("../presets/grid-hinf.json");

#[derive(Parser)]
#[command(name = "ctsls", version, about = "Continuous-time system level synthesis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// replace the built-in config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// print the built-in config and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize every cell and write one JSON document per design.
    Synth(RunArgs),
    /// Synthesize and simulate the disturbance experiment of the config.
    Simulate(RunArgs),
    /// Full sweep: results.csv, per-run JSON and simulations when configured.
    Sweep(RunArgs),
    /// Check a stored ensemble against a plant.
    Verify {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        plant: PathBuf,
        /// check the sparsity mask of this communication distance
        #[arg(long)]
        distance: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        q: f64,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        /// print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// 11-node chain, H2, K = 4, d = 2, impulse at the middle node.
    ReproduceChain(PresetArgs),
    /// 3x3 swing-equation grid, H2 sweep over K and d.
    ReproduceGridH2(PresetArgs),
    /// 3x3 swing-equation grid, H-infinity sweep.
    ReproduceGridHinf(PresetArgs),
}

fn load_preset(builtin: &str, args: &PresetArgs) -> Result<Option<ExperimentConfig>> {
    if args.print_config {
        println!("{builtin}");
        return Ok(None);
    }
    match &args.config {
        Some(path) => ExperimentConfig::load(path).map(Some),
        None => ExperimentConfig::from_str(builtin).map(Some),
    }
}

fn execute(cfg: &ExperimentConfig, out: &Path, outputs: Outputs) -> Result<bool> {
    let rows = run::run(cfg, out, outputs)?;
    run::print_rows(&rows);
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", rows.len());
    }
    Ok(failed == 0)
}

const SWEEP: Outputs = Outputs { csv: true, runs: true, sims: false };

fn sweep_outputs(cfg: &ExperimentConfig) -> Outputs {
    Outputs { sims: cfg.simulate.is_some(), ..SWEEP }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => execute(&ExperimentConfig::load(&a.config)?, &a.out, Outputs { csv: false, runs: true, sims: false }),
        Command::Simulate(a) => execute(&ExperimentConfig::load(&a.config)?, &a.out, Outputs { csv: false, runs: false, sims: true }),
        Command::Sweep(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            execute(&cfg, &a.out, sweep_outputs(&cfg))
        }
        Command::Verify { ensemble, plant, distance, q, r, json } => {
            let plant = verify::load_plant(&plant)?;
            let (ens, doc) = verify::load_ensemble(&ensemble)?;
            let weights = CostWeights::identity(plant.n(), plant.m(), q, r);
            let report = verify::verify(&plant, &ens, &doc, &weights, distance)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
            } else {
                println!("{report}");
            }
            Ok(report.passed())
        }
        Command::ReproduceChain(a) => preset(CHAIN_PRESET, &a),
        Command::ReproduceGridH2(a) => preset(GRID_H2_PRESET, &a),
        Command::ReproduceGridHinf(a) => preset(GRID_HINF_PRESET, &a),
    }
}

fn preset(builtin: &str, args: &PresetArgs) -> Result<bool> {
    match load_preset(builtin, args)? {
        Some(cfg) => execute(&cfg, &args.out, sweep_outputs(&cfg)),
        None => Ok(true),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
