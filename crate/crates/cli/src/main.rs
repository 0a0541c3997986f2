//! `gridmp`: synthetic grids, power flow, datasets, training, evaluation,
//! sweeps and diagnostics from the command line.
//!
//! Exit codes: 0 on success, 1 on error, 2 on invalid arguments, 3 when a
//! run completed but did not fully succeed (a non-converged power flow or
//! a sweep with failed legs).

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gridmp_core::diagnostics::{extract_distance_curve, mean_trace, write_curve_csv, write_trace_csv};
use gridmp_core::diff::Tensor;
use gridmp_core::grid::{build_synthetic_grid, Grid, GridKind};
use gridmp_core::harness::{
    checkpoint, evaluate_rmse, export_results, load_checkpoint, run_sweep, save_checkpoint, train, ExperimentConfig,
    Prepared, TrainConfig,
};
use gridmp_core::measurement::{build_dataset, Dataset, DatasetConfig, TierAssignment};
use gridmp_core::models::{Estimator, ModelKind};
use gridmp_core::powerflow::{read_loads_csv, solve_power_flow, write_solution_csv};
use gridmp_core::seeds::derive_seed;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_ENV: &str = "GRIDMP_SEED";
const EXIT_INCOMPLETE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "gridmp", version, about = "Graph state estimation for distribution grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic grid and write it as JSON
    Generate {
        #[arg(long)]
        kind: GridKind,
        #[arg(long)]
        buses: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve an AC power flow for one load snapshot
    Powerflow {
        #[arg(long)]
        grid: PathBuf,
        /// CSV with columns bus_id,p_pu,q_pu (positive = consumption)
        #[arg(long)]
        loads: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 30)]
        max_iter: usize,
    },
    /// Simulate measurements over a load horizon and write a dataset
    Dataset {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        timesteps: usize,
        /// Fraction of buses carrying a sensor
        #[arg(long)]
        penetration: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Noise tiers: lv (meters away from transformers) or mv
        #[arg(long, default_value = "lv")]
        tiers: TierAssignment,
    },
    /// Train one model on a dataset and write its best checkpoint
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Master seed; GRIDMP_SEED takes precedence
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML file with training settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Report test-split RMSE of a checkpoint
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run a penetration sweep described by a TOML file
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write layer traces or learned distance curves of a checkpoint
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not a u64"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<(Estimator, Prepared)> {
    let (est, scaler) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let data = Prepared::with_scaler(dataset, scaler)?;
    Ok((est, data))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { kind, buses, seed, out } => {
            let grid = build_synthetic_grid(kind, buses, seed)?;
            grid.save(&out)?;
            println!("wrote {kind} grid with {} buses, {} branches to {}", grid.n_buses(), grid.n_branches(), out.display());
            Ok(true)
        }
        Command::Powerflow { grid, loads, out, tol, max_iter } => {
            let grid = Grid::load(&grid)?;
            let (p, q) = read_loads_csv(&loads, grid.n_buses())?;
            let sol = solve_power_flow(&grid, &p, &q, tol, max_iter)?;
            write_solution_csv(&out, &sol)?;
            if sol.converged {
                println!("converged in {} iterations, mismatch {:.3e}", sol.iterations, sol.max_mismatch);
            } else {
                eprintln!(
                    "did not converge after {} iterations (mismatch {:.3e}){}",
                    sol.iterations,
                    sol.max_mismatch,
                    sol.diagnostic.as_deref().map(|d| format!(": {d}")).unwrap_or_default()
                );
            }
            Ok(sol.converged)
        }
        Command::Dataset { grid, timesteps, penetration, seed, out, tiers } => {
            let grid = Grid::load(&grid)?;
            let cfg = DatasetConfig {
                n_timesteps: timesteps,
                penetration,
                seed,
                tiers,
                load_scale: None,
            };
            let ds = build_dataset(&grid, &cfg)?;
            ds.save(&out)?;
            println!(
                "wrote {} samples over {} topologies ({} rejected) to {}",
                ds.samples.len(),
                ds.topologies.len(),
                ds.rejected.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Train { model, dataset, out, seed, config, max_epochs } => {
            let seed = seed_override()?.unwrap_or(seed);
            let mut tcfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => TrainConfig::default(),
            };
            if let Some(m) = max_epochs {
                tcfg.max_epochs = m;
            }
            let ds = load_dataset(&dataset)?;
            let data = Prepared::new(&ds)?;
            let mut est = Estimator::new(data.model_config(model, derive_seed(seed, "model", 0)))?;
            let history = train(&mut est, &data, &tcfg, derive_seed(seed, "training", 0))?;
            let rmse = evaluate_rmse(&est, &data)?;
            create_dir(&out)?;
            save_checkpoint(&checkpoint(&est, &data.scaler, Some(&history)), &out.join("checkpoint.json"))?;
            write_json(&out.join("history.json"), &history)?;
            write_json(&out.join("metrics.json"), &rmse)?;
            println!(
                "{model}: best epoch {} of {}, test RMSE {:.4e} p.u. / {:.4e} deg",
                history.best_epoch,
                history.epochs.len(),
                rmse.magnitude_pu,
                rmse.angle_deg
            );
            Ok(true)
        }
        Command::Evaluate { checkpoint, dataset } => {
            let ds = load_dataset(&dataset)?;
            let (est, data) = load_model(&checkpoint, &ds)?;
            let rmse = evaluate_rmse(&est, &data)?;
            println!("{}", serde_json::to_string(&rmse)?);
            Ok(true)
        }
        Command::Sweep { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override()? {
                cfg.master_seed = seed;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = run_sweep(&cfg)?;
            export_results(&outcome, &cfg.output_dir)?;
            println!(
                "{} legs succeeded, {} failed; results in {}",
                outcome.reports.len(),
                outcome.failed.len(),
                cfg.output_dir.display()
            );
            for f in &outcome.failed {
                eprintln!(
                    "failed: {} rate {} {}: {}",
                    f.grid,
                    f.rate,
                    f.model.map_or("dataset", |m| m.name()),
                    f.error
                );
            }
            Ok(outcome.all_succeeded())
        }
        Command::Diagnose { checkpoint, dataset, out } => {
            let ds = load_dataset(&dataset)?;
            let (est, data) = load_model(&checkpoint, &ds)?;
            create_dir(&out)?;
            match est.kind() {
                ModelKind::Gat | ModelKind::SkpGat => {
                    let trace = mean_trace(&est, &data.select(&data.test))?;
                    let path = out.join("layer_trace.csv");
                    write_trace_csv(&path, &trace)?;
                    println!("wrote {}", path.display());
                }
                ModelKind::Gnan | ModelKind::SkpGnan => {
                    let max_hop = data.topologies.iter().map(|t| t.dist.max_hop()).max().unwrap_or(1);
                    let edges: Vec<&Tensor> = data.select(&data.test).into_iter().map(|i| &i.e).collect();
                    let curve = extract_distance_curve(&est, max_hop, &Tensor::vstack(&edges))?;
                    for c in 0..curve.channels.len() {
                        let path = out.join(format!("distance_curve_c{c}.csv"));
                        write_curve_csv(&path, &curve, c)?;
                        println!("wrote {}", path.display());
                    }
                }
                ModelKind::Mlp => bail!("diagnostics need a graph model; {} has no layer graph", est.kind()),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_INCOMPLETE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
