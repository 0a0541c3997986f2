//! Training with early stopping, test-set RMSE, penetration sweeps and
//! result export.

mod sweep;

pub use sweep::{
    export_results, read_results_csv, run_sweep, ExperimentConfig, FailedLeg, GridSpec, MetricsReport, SweepOutcome,
    RESULTS_COLUMNS,
};

use crate::diff::{Checkpoint, DiffError, Tensor};
use crate::measurement::{Dataset, FeatureScaler, MeasurementError, EDGE_FEATURES, NODE_FEATURES};
use crate::models::{Batch, Estimator, ModelConfig, ModelError, ModelInput, ModelKind, TopologyContext};
use crate::seeds::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Samples per gradient chunk when the GNAN family accumulates a
/// full-dataset gradient.
const FULL_BATCH_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Optimiser and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Non-improving validation epochs before stopping.
    pub patience: usize,
    /// Non-improving validation epochs before each learning-rate halving.
    pub lr_patience: usize,
    /// Relative validation-loss decrease that counts as improvement.
    pub min_improvement: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Use one full-dataset gradient step per epoch for the GNAN family.
    pub full_batch_gnan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            patience: 3,
            lr_patience: 2,
            min_improvement: 1e-6,
            max_epochs: 200,
            batch_size: 32,
            full_batch_gnan: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        if self.patience == 0 || self.lr_patience == 0 {
            return Err(HarnessError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one validation epoch under [`Plateau`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauStep {
    Improved,
    Flat,
    HalveLr,
    Stop,
}

/// Early-stopping and learning-rate schedule state.
#[derive(Debug, Clone)]
pub struct Plateau {
    best: f64,
    bad: usize,
    patience: usize,
    lr_patience: usize,
    min_improvement: f64,
}

impl Plateau {
    pub fn new(config: &TrainConfig) -> Plateau {
        Plateau {
            best: f64::INFINITY,
            bad: 0,
            patience: config.patience,
            lr_patience: config.lr_patience,
            min_improvement: config.min_improvement,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> PlateauStep {
        let improved = if self.best.is_finite() {
            val < self.best - self.min_improvement * self.best.abs()
        } else {
            val.is_finite()
        };
        if improved {
            self.best = val;
            self.bad = 0;
            return PlateauStep::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            PlateauStep::Stop
        } else if self.bad.is_multiple_of(self.lr_patience) {
            PlateauStep::HalveLr
        } else {
            PlateauStep::Flat
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    EarlyStopped,
    MaxEpochs,
    /// A non-finite loss appeared; the best finite checkpoint is kept.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned parameters; 0 means initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub status: TrainStatus,
}

/// A dataset turned into standardized model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scaler: FeatureScaler,
    pub topologies: Vec<Arc<TopologyContext>>,
    pub inputs: Vec<ModelInput>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub n_buses: usize,
}

impl Prepared {
    /// Fits the scaler on the training split.
    pub fn new(dataset: &Dataset) -> Result<Prepared, HarnessError> {
        let scaler = FeatureScaler::fit(&dataset.train_samples());
        Self::with_scaler(dataset, scaler)
    }

    pub fn with_scaler(dataset: &Dataset, scaler: FeatureScaler) -> Result<Prepared, HarnessError> {
        let topologies: Vec<Arc<TopologyContext>> = (0..dataset.topologies.len())
            .map(|k| Arc::new(TopologyContext::from_grid(k, &dataset.topology_grid(k))))
            .collect();
        let inputs = dataset
            .samples
            .iter()
            .map(|s| ModelInput::new(s, &scaler, topologies[s.topology_id].clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Prepared {
            scaler,
            topologies,
            inputs,
            train: dataset.split.train.clone(),
            val: dataset.split.val.clone(),
            test: dataset.split.test.clone(),
            n_buses: dataset.n_buses(),
        })
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&ModelInput> {
        idx.iter().map(|&i| &self.inputs[i]).collect()
    }

    /// Model config sized for this data with the label readout fitted.
    pub fn model_config(&self, kind: ModelKind, seed: u64) -> ModelConfig {
        ModelConfig::new(kind, NODE_FEATURES.len(), EDGE_FEATURES.len(), self.n_buses, seed).with_scaler(&self.scaler)
    }
}

/// Mean loss over `inputs`, weighted by node count.
pub fn mean_loss(est: &Estimator, inputs: &[&ModelInput]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut nodes = 0usize;
    for chunk in inputs.chunks(FULL_BATCH_CHUNK) {
        let batch = Batch::new(chunk);
        total += est.loss_value(&batch)? * batch.total_nodes as f64;
        nodes += batch.total_nodes;
    }
    Ok(total / nodes as f64)
}

/// Loss and gradient of the whole set, accumulated chunk by chunk.
fn full_gradient(est: &mut Estimator, inputs: &[&ModelInput]) -> Result<f64, ModelError> {
    let total_nodes: usize = inputs.iter().map(|i| i.n()).sum();
    let ids: Vec<_> = est.params().ids().collect();
    let mut acc: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            let v = est.params().value(id);
            Tensor::zeros(v.rows(), v.cols())
        })
        .collect();
    let mut loss = 0.0;
    for chunk in inputs.chunks(FULL_BATCH_CHUNK) {
        let batch = Batch::new(chunk);
        let w = batch.total_nodes as f64 / total_nodes as f64;
        loss += w * est.loss_and_grad(&batch)?;
        for (a, &id) in acc.iter_mut().zip(&ids) {
            let g = est.params().grad(id).expect("populated by loss_and_grad");
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += w * y;
            }
        }
    }
    for (a, &id) in acc.into_iter().zip(&ids) {
        est.params_mut().set_grad(id, a);
    }
    Ok(loss)
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Numeric { .. })
}

/// Trains `est` in place and leaves it at the best-validation parameters.
///
/// Mini-batch order is drawn from the `"batches"` stream of `seed`.
pub fn train(
    est: &mut Estimator,
    data: &Prepared,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory, HarnessError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(HarnessError::EmptySplit("validation"));
    }
    let val = data.select(&data.val);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        status: TrainStatus::MaxEpochs,
    };
    if config.max_epochs == 0 {
        return Ok(history);
    }
    let mut plateau = Plateau::new(config);
    let init = mean_loss(est, &val)?;
    plateau.observe(init);
    history.best_val_loss = init;
    let mut best = est.params().snapshot();
    let mut lr = config.lr;
    let full = config.full_batch_gnan && est.kind().is_gnan_family();

    for epoch in 1..=config.max_epochs {
        let mut order = data.train.clone();
        order.shuffle(&mut stream_rng(seed, "batches", epoch as u64));
        let step = |est: &mut Estimator| -> Result<f64, ModelError> {
            if full {
                let l = full_gradient(est, &data.select(&order))?;
                est.params_mut().adamax_step(lr)?;
                return Ok(l);
            }
            let mut total = 0.0;
            let mut nodes = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let inputs = data.select(chunk);
                let batch = Batch::new(&inputs);
                total += est.loss_and_grad(&batch)? * batch.total_nodes as f64;
                nodes += batch.total_nodes;
                est.params_mut().adamax_step(lr)?;
            }
            Ok(total / nodes as f64)
        };
        let outcome = step(est).and_then(|train_loss| Ok((train_loss, mean_loss(est, &val)?)));
        let (train_loss, val_loss) = match outcome {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                log::warn!("{} diverged at epoch {epoch}: {e}", est.kind());
                history.status = TrainStatus::Diverged;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        match plateau.observe(val_loss) {
            PlateauStep::Improved => {
                best = est.params().snapshot();
                history.best_epoch = epoch;
                history.best_val_loss = val_loss;
            }
            PlateauStep::Flat => {}
            PlateauStep::HalveLr => lr /= 2.0,
            PlateauStep::Stop => {
                history.status = TrainStatus::EarlyStopped;
                break;
            }
        }
    }
    est.params_mut().load_values(&best)?;
    Ok(history)
}

/// Root-mean-square error per channel: magnitude in p.u., angle in
/// degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub magnitude_pu: f64,
    pub angle_deg: f64,
}

/// RMSE of predictions against labels, both `n x 2` with angles in radians.
pub fn rmse(pred: &Tensor, labels: &Tensor) -> Rmse {
    let n = pred.rows().max(1) as f64;
    let mut sq = [0.0; 2];
    for r in 0..pred.rows() {
        for (c, acc) in sq.iter_mut().enumerate() {
            let d = pred.get(r, c) - labels.get(r, c);
            *acc += d * d;
        }
    }
    Rmse {
        magnitude_pu: (sq[0] / n).sqrt(),
        angle_deg: (sq[1] / n).sqrt().to_degrees(),
    }
}

/// Test-split RMSE over every bus of every test sample.
pub fn evaluate_rmse(est: &Estimator, data: &Prepared) -> Result<Rmse, HarnessError> {
    evaluate_on(est, &data.select(&data.test))
}

pub fn evaluate_on(est: &Estimator, inputs: &[&ModelInput]) -> Result<Rmse, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::EmptySplit("test"));
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for chunk in inputs.chunks(FULL_BATCH_CHUNK) {
        let batch = Batch::new(chunk);
        preds.push(est.predict(&batch)?);
        labels.push(batch.y.clone());
    }
    let p: Vec<&Tensor> = preds.iter().collect();
    let l: Vec<&Tensor> = labels.iter().collect();
    Ok(rmse(&Tensor::vstack(&p), &Tensor::vstack(&l)))
}

/// RMSE of the constant flat-profile prediction (1 p.u., 0 rad).
pub fn trivial_rmse(inputs: &[&ModelInput]) -> Rmse {
    let labels: Vec<&Tensor> = inputs.iter().map(|i| &i.y).collect();
    let y = Tensor::vstack(&labels);
    let flat = Tensor::from_fn(y.rows(), 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
    rmse(&flat, &y)
}

/// Checkpoint carrying the feature scaler and training history.
pub fn checkpoint(est: &Estimator, scaler: &FeatureScaler, history: Option<&TrainHistory>) -> Checkpoint {
    est.to_checkpoint(serde_json::json!({ "scaler": scaler, "history": history }))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    ckpt.write_to(std::io::BufWriter::new(file)).map_err(|e| io_err(path, e))
}

/// Loads a model and its scaler.
pub fn load_checkpoint(path: &Path) -> Result<(Estimator, FeatureScaler), HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let ckpt = Checkpoint::read_from(std::io::BufReader::new(file)).map_err(|e| io_err(path, e))?;
    let est = Estimator::from_checkpoint(&ckpt)?;
    let scaler: FeatureScaler = serde_json::from_value(ckpt.meta["extra"]["scaler"].clone())
        .map_err(|e| io_err(path, format!("checkpoint has no feature scaler: {e}")))?;
    Ok((est, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_stops_after_patience_flat_epochs() {
        let cfg = TrainConfig::default();
        let mut p = Plateau::new(&cfg);
        assert_eq!(p.observe(1.0), PlateauStep::Improved);
        assert_eq!(p.observe(0.5), PlateauStep::Improved);
        assert_eq!(p.observe(0.5), PlateauStep::Flat);
        assert_eq!(p.observe(0.6), PlateauStep::HalveLr);
        assert_eq!(p.observe(0.5 * (1.0 - 1e-7)), PlateauStep::Stop);
    }

    #[test]
    fn plateau_resets_on_improvement() {
        let mut p = Plateau::new(&TrainConfig::default());
        p.observe(1.0);
        p.observe(1.0);
        p.observe(1.0);
        assert_eq!(p.observe(0.9), PlateauStep::Improved);
        assert_eq!(p.observe(0.9), PlateauStep::Flat);
        assert_eq!(p.best(), 0.9);
    }

    #[test]
    fn rmse_single_bus_arithmetic() {
        let pred = Tensor::from_vec(1, 2, vec![1.001, 1f64.to_radians()]);
        let y = Tensor::from_vec(1, 2, vec![1.0, 0.0]);
        let r = rmse(&pred, &y);
        assert!((r.magnitude_pu - 0.001).abs() < 1e-12);
        assert!((r.angle_deg - 1.0).abs() < 1e-12);
        assert_eq!(rmse(&y, &y), Rmse { magnitude_pu: 0.0, angle_deg: 0.0 });
    }

    #[test]
    fn invalid_train_config_is_rejected() {
        let cfg = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
