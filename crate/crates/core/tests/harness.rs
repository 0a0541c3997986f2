mod common;

use common::*;
use gridmp_core::diff::Tensor;
use gridmp_core::harness::{
    checkpoint, evaluate_rmse, export_results, mean_loss, read_results_csv, rmse, run_sweep, train,
    ExperimentConfig, HarnessError, MetricsReport, Plateau, PlateauStep, SweepOutcome, TrainConfig, TrainStatus,
};
use gridmp_core::models::{Estimator, ModelKind};

fn values(est: &Estimator) -> Vec<Vec<f64>> {
    est.params().ids().map(|id| est.params().value(id).data().to_vec()).collect()
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let (_, p) = five_bus(30, 1);
    for kind in ModelKind::ALL {
        let mut est = estimator(&p, kind, 3);
        let init = values(&est);
        let history = train(&mut est, &p, &quick(0), 0).unwrap();
        assert!(history.epochs.is_empty(), "{kind}");
        assert_eq!(history.best_epoch, 0);
        assert_eq!(values(&est), init, "{kind}");
    }
}

#[test]
fn mlp_fits_constant_labels() {
    let (_, mut p) = five_bus(60, 2);
    let est0 = estimator(&p, ModelKind::Mlp, 4);
    let c = est0.config().clone();
    let target = [c.label_mean[0] + 3.0 * c.label_std[0], c.label_mean[1] - 2.0 * c.label_std[1]];
    for input in &mut p.inputs {
        input.y = Tensor::from_fn(input.n(), 2, |_, ch| target[ch]);
    }
    let mut est = est0;
    let before = mean_loss(&est, &p.select(&p.train)).unwrap();
    let history = train(&mut est, &p, &quick(50), 5).unwrap();
    let after = mean_loss(&est, &p.select(&p.train)).unwrap();
    assert!(history.epochs.len() <= 50);
    assert!(after < 0.1 * before, "loss {before:.3e} -> {after:.3e} over {} epochs", history.epochs.len());
}

#[test]
fn three_flat_validation_epochs_stop_training() {
    let mut plateau = Plateau::new(&TrainConfig::default());
    let steps: Vec<PlateauStep> = [1.0, 1.0, 1.0, 1.0].iter().map(|&v| plateau.observe(v)).collect();
    assert_eq!(
        steps,
        vec![PlateauStep::Improved, PlateauStep::Flat, PlateauStep::HalveLr, PlateauStep::Stop]
    );

    // A learning rate too small to move any parameter makes every
    // validation epoch flat.
    let (_, p) = five_bus(30, 1);
    let mut est = estimator(&p, ModelKind::Mlp, 0);
    let cfg = TrainConfig {
        lr: 1e-300,
        ..quick(100)
    };
    let history = train(&mut est, &p, &cfg, 0).unwrap();
    assert_eq!(history.status, TrainStatus::EarlyStopped);
    assert_eq!(history.epochs.len(), 3);
    assert_eq!(history.best_epoch, 0);
    let lrs: Vec<f64> = history.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-300, 1e-300, 0.5e-300]);
}

#[test]
fn divergence_keeps_the_last_finite_parameters() {
    let (_, p) = five_bus(30, 1);
    let mut est = estimator(&p, ModelKind::Mlp, 0);
    let init = values(&est);
    let cfg = TrainConfig {
        lr: 1e300,
        ..quick(20)
    };
    let history = train(&mut est, &p, &cfg, 0).unwrap();
    assert_eq!(history.status, TrainStatus::Diverged);
    assert_eq!(history.best_epoch, 0);
    assert_eq!(values(&est), init);
}

#[test]
fn training_returns_the_best_validation_checkpoint() {
    let (_, p) = five_bus(60, 3);
    for kind in [ModelKind::Mlp, ModelKind::Gat, ModelKind::Gnan] {
        let mut est = estimator(&p, kind, 1);
        let history = train(&mut est, &p, &quick(8), 2).unwrap();
        let val = mean_loss(&est, &p.select(&p.val)).unwrap();
        assert_eq!(val, history.best_val_loss, "{kind}");
        assert!(history.epochs.iter().all(|e| e.val_loss >= val), "{kind}");
        if history.best_epoch > 0 {
            assert_eq!(history.epochs[history.best_epoch - 1].val_loss, val);
        }
    }
}

#[test]
fn rmse_matches_a_direct_computation() {
    let (_, p) = five_bus(40, 5);
    let est = estimator(&p, ModelKind::Gat, 2);
    let got = evaluate_rmse(&est, &p).unwrap();
    let (mut mag, mut ang, mut n) = (Vec::new(), Vec::new(), 0usize);
    for &i in &p.test {
        let input = &p.inputs[i];
        let pred = est.predict_one(input).unwrap();
        for b in 0..input.n() {
            mag.push(pred.get(b, 0) - input.y.get(b, 0));
            ang.push((pred.get(b, 1) - input.y.get(b, 1)).to_degrees());
            n += 1;
        }
    }
    let root_mean_sq = |v: &[f64]| (v.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    assert!((got.magnitude_pu - root_mean_sq(&mag)).abs() <= 1e-12 * root_mean_sq(&mag));
    assert!((got.angle_deg - root_mean_sq(&ang)).abs() <= 1e-12 * root_mean_sq(&ang));
}

#[test]
fn rmse_arithmetic() {
    let y = Tensor::from_fn(3, 2, |i, c| i as f64 + c as f64);
    let perfect = rmse(&y, &y);
    assert_eq!((perfect.magnitude_pu, perfect.angle_deg), (0.0, 0.0));
    let pred = Tensor::from_vec(1, 2, vec![1.001, 1f64.to_radians()]);
    let one = rmse(&pred, &Tensor::from_vec(1, 2, vec![1.0, 0.0]));
    assert!((one.magnitude_pu - 0.001).abs() < 1e-12);
    assert!((one.angle_deg - 1.0).abs() < 1e-12);
}

#[test]
fn empty_splits_are_rejected() {
    let (_, mut p) = five_bus(30, 1);
    let mut est = estimator(&p, ModelKind::Mlp, 0);
    let test = std::mem::take(&mut p.test);
    assert!(matches!(evaluate_rmse(&est, &p), Err(HarnessError::EmptySplit("test"))));
    p.test = test;
    p.train.clear();
    assert!(matches!(train(&mut est, &p, &quick(1), 0), Err(HarnessError::EmptySplit("train"))));
}

#[test]
fn parameter_counts_equal_checkpoint_tensor_sizes() {
    let (_, p) = five_bus(30, 1);
    for kind in ModelKind::ALL {
        let est = estimator(&p, kind, 0);
        let ckpt = checkpoint(&est, &p.scaler, None);
        let total: usize = ckpt.params.ids().map(|id| ckpt.params.value(id).len()).sum();
        assert_eq!(est.param_count(), total, "{kind}");
        assert!(total > 0);
    }
}

fn try_sweep_config(grids: &str, rates: &str, models: &str) -> Result<ExperimentConfig, HarnessError> {
    ExperimentConfig::from_toml(&format!(
        r#"
master_seed = 11
n_timesteps = 30
rates = {rates}
models = {models}
record_timing = false
output_dir = "unused"
{grids}
[training]
max_epochs = 2
"#
    ))
}

fn sweep_config(grids: &str, rates: &str, models: &str) -> ExperimentConfig {
    try_sweep_config(grids, rates, models).unwrap()
}

const ONE_GRID: &str = r#"
[[grids]]
kind = "radial"
buses = 6
seed = 2
"#;

#[test]
fn single_leg_sweep_is_deterministic() {
    let cfg = sweep_config(ONE_GRID, "[1.0]", r#"["skp-gat"]"#);
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    assert_eq!(a.reports.len(), 1);
    assert!(a.all_succeeded());
    assert_eq!(a, b);
    let r = &a.reports[0];
    assert_eq!((r.n_buses, r.rate, r.model), (6, 1.0, ModelKind::SkpGat));
    assert!(r.rmse_mag_pu >= 0.0 && r.rmse_ang_deg >= 0.0 && r.params > 0);
    assert_eq!((r.train_s, r.infer_s), (0.0, 0.0));
}

#[test]
fn failed_legs_are_recorded_and_the_sweep_continues() {
    let grids = format!("{ONE_GRID}\n[[grids]]\nkind = \"radial\"\nbuses = 1\nseed = 2\n");
    let out = run_sweep(&sweep_config(&grids, "[0.5]", r#"["mlp", "gnan"]"#)).unwrap();
    assert_eq!(out.reports.len(), 2);
    assert_eq!(out.failed.len(), 1);
    assert!(out.failed[0].model.is_none());
    assert!(!out.all_succeeded());
}

#[test]
fn invalid_sweep_configs_are_rejected() {
    assert!(try_sweep_config(ONE_GRID, "[1.5]", r#"["mlp"]"#).is_err());
    assert!(try_sweep_config(ONE_GRID, "[0.5]", "[]").is_err());
    let mut cfg = sweep_config(ONE_GRID, "[0.5]", r#"["mlp"]"#);
    cfg.training.patience = 0;
    assert!(cfg.validate().is_err());
    assert!(run_sweep(&cfg).is_err());
}

fn fake_reports(n: usize) -> Vec<MetricsReport> {
    (0..n)
        .map(|i| MetricsReport {
            grid: format!("radial-{}", i % 5),
            n_buses: 15 + i,
            rate: [0.2, 0.9][i % 2],
            model: ModelKind::ALL[i % 5],
            rmse_mag_pu: 1e-4 * (i as f64 + 0.123_456_789),
            rmse_ang_deg: 0.1 / (i as f64 + 3.0),
            train_s: i as f64 * 1.5,
            infer_s: 1e-3 / (i as f64 + 7.0),
            params: 1000 + 37 * i,
            best_epoch: i % 9,
        })
        .collect()
}

#[test]
fn exported_results_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = SweepOutcome {
        reports: fake_reports(50),
        failed: Vec::new(),
    };
    export_results(&outcome, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert_eq!(
        csv.lines().next().unwrap(),
        "grid,n_buses,rate,model,rmse_mag_pu,rmse_ang_deg,train_s,infer_s,params,best_epoch"
    );
    assert_eq!(read_results_csv(&dir.path().join("results.csv")).unwrap(), outcome.reports);
    let json: Vec<MetricsReport> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json, outcome.reports);
}

#[test]
fn empty_results_export_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    export_results(&SweepOutcome::default(), dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(read_results_csv(&dir.path().join("results.csv")).unwrap().is_empty());
}

#[test]
fn unwritable_output_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "").unwrap();
    let err = export_results(&SweepOutcome::default(), &file.join("sub")).unwrap_err();
    assert!(err.to_string().contains("occupied"), "{err}");
}
