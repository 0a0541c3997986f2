use super::{evaluate_rmse, io_err, train, HarnessError, Prepared, TrainConfig};
use crate::grid::{build_synthetic_grid, GridKind};
use crate::measurement::{build_dataset, DatasetConfig, TierAssignment};
use crate::models::{Estimator, ModelKind};
use crate::seeds::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RESULTS_COLUMNS: [&str; 10] = [
    "grid",
    "n_buses",
    "rate",
    "model",
    "rmse_mag_pu",
    "rmse_ang_deg",
    "train_s",
    "infer_s",
    "params",
    "best_epoch",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kind: GridKind,
    pub buses: usize,
    pub seed: u64,
    /// Noise tiers; radial grids default to low voltage, meshed to medium.
    #[serde(default)]
    pub tiers: Option<TierAssignment>,
}

impl GridSpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.kind, self.buses)
    }

    pub fn tier_assignment(&self) -> TierAssignment {
        self.tiers.unwrap_or(match self.kind {
            GridKind::Radial => TierAssignment::Lv,
            GridKind::Meshed => TierAssignment::Mv,
        })
    }
}

/// Sweep definition, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_timesteps: usize,
    pub rates: Vec<f64>,
    pub models: Vec<ModelKind>,
    pub grids: Vec<GridSpec>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Record wall-clock timings; when off the timing columns are 0 so
    /// reruns are byte-identical.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.grids.is_empty() {
            return bad("at least one grid is required".into());
        }
        if self.rates.is_empty() {
            return bad("at least one penetration rate is required".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("penetration rate {r} outside [0, 1]"));
        }
        if self.n_timesteps == 0 {
            return bad("n_timesteps must be positive".into());
        }
        self.training.validate()
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub grid: String,
    pub n_buses: usize,
    pub rate: f64,
    pub model: ModelKind,
    pub rmse_mag_pu: f64,
    pub rmse_ang_deg: f64,
    pub train_s: f64,
    pub infer_s: f64,
    pub params: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedLeg {
    pub grid: String,
    pub rate: f64,
    /// `None` when the dataset itself could not be built.
    pub model: Option<ModelKind>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub failed: Vec<FailedLeg>,
}

impl SweepOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

fn run_leg(
    cfg: &ExperimentConfig,
    spec: &GridSpec,
    data: &Prepared,
    rate: f64,
    kind: ModelKind,
    seed: u64,
) -> Result<MetricsReport, HarnessError> {
    let mut est = Estimator::new(data.model_config(kind, derive_seed(seed, "model", 0)))?;
    let t0 = Instant::now();
    let history = train(&mut est, data, &cfg.training, derive_seed(seed, "training", 0))?;
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let err = evaluate_rmse(&est, data)?;
    let infer_s = t1.elapsed().as_secs_f64();
    let (train_s, infer_s) = if cfg.record_timing { (train_s, infer_s) } else { (0.0, 0.0) };
    Ok(MetricsReport {
        grid: spec.name(),
        n_buses: data.n_buses,
        rate,
        model: kind,
        rmse_mag_pu: err.magnitude_pu,
        rmse_ang_deg: err.angle_deg,
        train_s,
        infer_s,
        params: est.param_count(),
        best_epoch: history.best_epoch,
    })
}

/// Every (grid, rate, model) leg in order. Failing legs are recorded and
/// the sweep moves on. Each leg's seeds derive from the master seed and
/// the leg's position only.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    let mut out = SweepOutcome::default();
    for (gi, spec) in cfg.grids.iter().enumerate() {
        let grid = match build_synthetic_grid(spec.kind, spec.buses, spec.seed) {
            Ok(g) => g,
            Err(e) => {
                for &rate in &cfg.rates {
                    out.failed.push(FailedLeg {
                        grid: spec.name(),
                        rate,
                        model: None,
                        error: e.to_string(),
                    });
                }
                continue;
            }
        };
        for (ri, &rate) in cfg.rates.iter().enumerate() {
            let leg_seed = derive_seed(cfg.master_seed, &format!("leg-{gi}"), ri as u64);
            let dcfg = DatasetConfig {
                n_timesteps: cfg.n_timesteps,
                penetration: rate,
                seed: derive_seed(leg_seed, "dataset", 0),
                tiers: spec.tier_assignment(),
                load_scale: None,
            };
            let data = build_dataset(&grid, &dcfg)
                .map_err(HarnessError::from)
                .and_then(|d| Prepared::new(&d));
            let data = match data {
                Ok(d) => d,
                Err(e) => {
                    log::error!("{} at rate {rate}: {e}", spec.name());
                    out.failed.push(FailedLeg {
                        grid: spec.name(),
                        rate,
                        model: None,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            for &kind in &cfg.models {
                log::info!("leg {} rate {rate} model {kind}", spec.name());
                let seed = derive_seed(leg_seed, kind.name(), 0);
                match run_leg(cfg, spec, &data, rate, kind, seed) {
                    Ok(r) => out.reports.push(r),
                    Err(e) => {
                        log::error!("{} rate {rate} {kind}: {e}", spec.name());
                        out.failed.push(FailedLeg {
                            grid: spec.name(),
                            rate,
                            model: Some(kind),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

const PLOT_RESULTS: &str = r#"# Plots RMSE against penetration rate from results.csv.
import sys
import pandas as pd
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "results.csv"
df = pd.read_csv(path)
for grid, g in df.groupby("grid"):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for model, m in g.groupby("model"):
        m = m.sort_values("rate")
        axes[0].plot(m["rate"], m["rmse_mag_pu"], marker="o", label=model)
        axes[1].plot(m["rate"], m["rmse_ang_deg"], marker="o", label=model)
    axes[0].set_ylabel("RMSE magnitude (p.u.)")
    axes[1].set_ylabel("RMSE angle (deg)")
    for ax in axes:
        ax.set_xlabel("penetration rate")
        ax.set_yscale("log")
        ax.legend()
    fig.suptitle(grid)
    fig.tight_layout()
    fig.savefig(f"rmse_{grid}.png", dpi=150)
"#;

const PLOT_DIAGNOSTICS: &str = r#"# Plots layer traces and distance curves written by `gridmp diagnose`.
import glob
import pandas as pd
import matplotlib.pyplot as plt

for path in glob.glob("layer_trace*.csv"):
    df = pd.read_csv(path)
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(df["layer"], df["dirichlet_energy"], marker="o")
    ax[0].set_yscale("log")
    ax[0].set_title("Dirichlet energy")
    ax[1].plot(df["layer"], df["rayleigh_quotient"], marker="o")
    ax[1].set_title("Rayleigh quotient")
    fig.tight_layout()
    fig.savefig(path.replace(".csv", ".png"), dpi=150)

for path in glob.glob("distance_curve*.csv"):
    df = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(df["hop"], df["weight"], marker="o")
    ax.set_xlabel("hop distance")
    ax.set_ylabel("learned weight")
    fig.tight_layout()
    fig.savefig(path.replace(".csv", ".png"), dpi=150)
"#;

/// Writes `results.csv`, `results.json`, `failed_legs.json` and the plot
/// scripts into `out_dir`.
pub fn export_results(outcome: &SweepOutcome, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(RESULTS_COLUMNS).map_err(|e| io_err(&csv_path, e))?;
    for r in &outcome.reports {
        w.write_record([
            r.grid.clone(),
            r.n_buses.to_string(),
            r.rate.to_string(),
            r.model.name().to_string(),
            r.rmse_mag_pu.to_string(),
            r.rmse_ang_deg.to_string(),
            r.train_s.to_string(),
            r.infer_s.to_string(),
            r.params.to_string(),
            r.best_epoch.to_string(),
        ])
        .map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;

    let write = |name: &str, text: String| -> Result<(), HarnessError> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("results.json", pretty(&outcome.reports))?;
    write("failed_legs.json", pretty(&outcome.failed))?;
    write("plot_results.py", PLOT_RESULTS.to_string())?;
    write("plot_diagnostics.py", PLOT_DIAGNOSTICS.to_string())?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Parses a `results.csv` written by [`export_results`].
pub fn read_results_csv(path: &Path) -> Result<Vec<MetricsReport>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        return Err(io_err(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let f = |i: usize| -> Result<f64, HarnessError> {
            rec[i].parse().map_err(|e| io_err(path, format!("column {}: {e}", RESULTS_COLUMNS[i])))
        };
        let u = |i: usize| -> Result<usize, HarnessError> {
            rec[i].parse().map_err(|e| io_err(path, format!("column {}: {e}", RESULTS_COLUMNS[i])))
        };
        out.push(MetricsReport {
            grid: rec[0].to_string(),
            n_buses: u(1)?,
            rate: f(2)?,
            model: rec[3].parse().map_err(|e: String| io_err(path, e))?,
            rmse_mag_pu: f(4)?,
            rmse_ang_deg: f(5)?,
            train_s: f(6)?,
            infer_s: f(7)?,
            params: u(8)?,
            best_epoch: u(9)?,
        });
    }
    Ok(out)
}
