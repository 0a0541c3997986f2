//! Synthetic load profiles, sensor placement, measurement noise and the
//! assembly of power-flow results into training samples.

mod dataset;
mod scaler;

pub use dataset::{build_dataset, Dataset, DatasetConfig, SampleRecord};
pub use scaler::FeatureScaler;

use crate::diff::Tensor;
use crate::grid::{BranchId, BusId, Grid};
use crate::powerflow::{branch_flows, PowerFlowSolution};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// Timesteps per simulated day (15-minute resolution).
pub const STEPS_PER_DAY: usize = 96;
pub const ANGLE_NOISE_FLOOR: f64 = 0.01;
pub const MAX_LOAD_PU: f64 = 0.1;

pub const NODE_FEATURES: [&str; 9] = [
    "v_mag_meas",
    "v_ang_meas",
    "p_meas",
    "q_meas",
    "meas_present",
    "is_slack",
    "vn_pu",
    "time_sin",
    "time_cos",
];

pub const EDGE_FEATURES: [&str; 9] = [
    "p_flow_meas",
    "q_flow_meas",
    "p_std",
    "q_std",
    "conductance",
    "susceptance",
    "shift_rad",
    "is_transformer",
    "switch_closed",
];

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("penetration rate must lie in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("sample rejected at timestep {timestep}: {reason}")]
    Rejected { timestep: usize, reason: String },
    #[error("need at least 10 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    PowerFlow(#[from] crate::powerflow::PowerFlowError),
}

/// Relative one-sigma error of each measured quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseTier {
    pub v_mag_rate: f64,
    pub v_ang_rate: f64,
    pub p_rate: f64,
    pub q_rate: f64,
}

impl NoiseTier {
    /// Substation-grade equipment.
    pub const DIGIONS: NoiseTier = NoiseTier {
        v_mag_rate: 0.002,
        v_ang_rate: 0.005,
        p_rate: 0.005,
        q_rate: 0.010,
    };
    /// Household smart meters.
    pub const IMSYS: NoiseTier = NoiseTier {
        v_mag_rate: 0.005,
        v_ang_rate: 0.010,
        p_rate: 0.010,
        q_rate: 0.020,
    };
    pub const EXACT: NoiseTier = NoiseTier {
        v_mag_rate: 0.0,
        v_ang_rate: 0.0,
        p_rate: 0.0,
        q_rate: 0.0,
    };
}

/// How noise tiers are assigned to buses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierAssignment {
    /// Medium voltage: high-precision equipment everywhere.
    Mv,
    /// Low voltage: high precision at transformer buses, meters elsewhere.
    Lv,
}

impl std::str::FromStr for TierAssignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mv" => Ok(TierAssignment::Mv),
            "lv" => Ok(TierAssignment::Lv),
            other => Err(format!("unknown tier assignment `{other}` (expected mv|lv)")),
        }
    }
}

/// Per-bus noise tier. A bus counts as a transformer bus when any branch
/// flagged as a transformer touches it.
pub fn bus_tiers(grid: &Grid, assignment: TierAssignment) -> Vec<NoiseTier> {
    match assignment {
        TierAssignment::Mv => vec![NoiseTier::DIGIONS; grid.n_buses()],
        TierAssignment::Lv => {
            let mut tiers = vec![NoiseTier::IMSYS; grid.n_buses()];
            for br in grid.branches.iter().filter(|b| b.transformer) {
                tiers[br.from] = NoiseTier::DIGIONS;
                tiers[br.to] = NoiseTier::DIGIONS;
            }
            tiers
        }
    }
}

/// Load time series indexed `[timestep][bus]`, positive = consumption.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfiles {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

/// Daily sinusoid per bus with a random base level, swing and phase,
/// multiplied by lognormal noise and clipped to `[0, 0.1]` p.u. Reactive
/// power follows active power with a per-bus ratio in `[0.2, 0.5]`.
pub fn generate_profiles<R: Rng>(n_buses: usize, n_timesteps: usize, rng: &mut R) -> LoadProfiles {
    let jitter = LogNormal::new(0.0, 0.1).expect("valid lognormal");
    let buses: Vec<(f64, f64, f64, f64)> = (0..n_buses)
        .map(|_| {
            (
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.3..0.6),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.2..=0.5),
            )
        })
        .collect();
    let mut p = Vec::with_capacity(n_timesteps);
    let mut q = Vec::with_capacity(n_timesteps);
    for t in 0..n_timesteps {
        let angle = TAU * t as f64 / STEPS_PER_DAY as f64;
        let mut pt = Vec::with_capacity(n_buses);
        let mut qt = Vec::with_capacity(n_buses);
        for &(base, swing, phase, ratio) in &buses {
            let v = base * (1.0 + swing * (angle + phase).sin()) * jitter.sample(rng);
            let v = v.clamp(0.0, MAX_LOAD_PU);
            pt.push(v);
            qt.push(v * ratio);
        }
        p.push(pt);
        q.push(qt);
    }
    LoadProfiles { p, q }
}

/// Number of sensors for a penetration rate: `ceil(rate * n)`, at least one.
pub fn measured_count(n_buses: usize, rate: f64) -> usize {
    // the epsilon keeps products like 0.3 * 10 from rounding up to 4
    (((rate * n_buses as f64) - 1e-9).ceil().max(1.0) as usize).min(n_buses)
}

/// Fixed sensor placement: the slack plus randomly chosen other buses.
pub fn select_measured_buses<R: Rng>(grid: &Grid, rate: f64, rng: &mut R) -> Result<Vec<bool>, MeasurementError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MeasurementError::InvalidRate(rate));
    }
    let n = grid.n_buses();
    let k = measured_count(n, rate);
    let mut others: Vec<BusId> = (0..n).filter(|&b| b != grid.slack).collect();
    others.shuffle(rng);
    let mut mask = vec![false; n];
    mask[grid.slack] = true;
    for &b in others.iter().take(k - 1) {
        mask[b] = true;
    }
    Ok(mask)
}

/// `value + draw * rate * |value|`.
pub fn apply_noise(value: f64, rate: f64, draw: f64) -> f64 {
    value + draw * rate * value.abs()
}

/// Angle variant with the `|value|` scale floored at 0.01 rad.
pub fn apply_angle_noise(value: f64, rate: f64, draw: f64) -> f64 {
    value + draw * rate * value.abs().max(ANGLE_NOISE_FLOOR)
}

/// One timestep of features and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub topology_id: usize,
    pub timestep: usize,
    /// `N x 9`, columns per [`NODE_FEATURES`].
    pub node_features: Tensor,
    /// `M x 9`, columns per [`EDGE_FEATURES`], one row per direction of
    /// every closed branch.
    pub edge_features: Tensor,
    /// `(source, target)` of each edge row.
    pub edges: Vec<(BusId, BusId)>,
    pub edge_branch: Vec<BranchId>,
    pub measured_mask: Vec<bool>,
    /// `N x 2`: voltage magnitude (p.u.) and angle (rad).
    pub labels: Tensor,
}

/// Directed edge list of the closed branches: each branch contributes
/// `from -> to` followed by `to -> from`.
pub fn directed_edges(grid: &Grid) -> (Vec<(BusId, BusId)>, Vec<BranchId>) {
    let mut edges = Vec::new();
    let mut ids = Vec::new();
    for br in grid.closed_branches() {
        edges.push((br.from, br.to));
        edges.push((br.to, br.from));
        ids.push(br.id);
        ids.push(br.id);
    }
    (edges, ids)
}

/// Builds a sample from a converged power flow on `grid` (whose switch
/// states define the active topology). Labels are the noiseless solution.
pub fn assemble_sample<R: Rng>(
    grid: &Grid,
    topology_id: usize,
    solution: &PowerFlowSolution,
    mask: &[bool],
    tiers: &[NoiseTier],
    timestep: usize,
    rng: &mut R,
) -> Result<GraphSample, MeasurementError> {
    if !solution.converged {
        return Err(MeasurementError::Rejected {
            timestep,
            reason: solution
                .diagnostic
                .clone()
                .unwrap_or_else(|| "power flow did not converge".into()),
        });
    }
    let n = grid.n_buses();
    if mask.len() != n || tiers.len() != n || solution.v_mag.len() != n {
        return Err(MeasurementError::Invalid(format!(
            "mask/tier/solution lengths {}/{}/{} do not match {n} buses",
            mask.len(),
            tiers.len(),
            solution.v_mag.len()
        )));
    }
    let mut draw = || -> f64 { StandardNormal.sample(rng) };

    let angle = TAU * (timestep % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
    let mut x = Tensor::zeros(n, NODE_FEATURES.len());
    for i in 0..n {
        let row = x.row_mut(i);
        if mask[i] {
            let t = tiers[i];
            row[0] = apply_noise(solution.v_mag[i], t.v_mag_rate, draw());
            row[1] = apply_angle_noise(solution.v_ang[i], t.v_ang_rate, draw());
            row[2] = apply_noise(solution.p_inj[i], t.p_rate, draw());
            row[3] = apply_noise(solution.q_inj[i], t.q_rate, draw());
            row[4] = 1.0;
        }
        row[5] = if i == grid.slack { 1.0 } else { 0.0 };
        row[6] = grid.buses[i].vn_pu;
        row[7] = angle.sin();
        row[8] = angle.cos();
    }

    let (edges, edge_branch) = directed_edges(grid);
    let flows = branch_flows(grid, solution);
    let mut e = Tensor::zeros(edges.len(), EDGE_FEATURES.len());
    for (k, ((src, _dst), &bid)) in edges.iter().zip(&edge_branch).enumerate() {
        let br = &grid.branches[bid];
        let &(_, pf, qf, pt, qt) = flows
            .iter()
            .find(|f| f.0 == bid)
            .expect("flows cover closed branches");
        let forward = *src == br.from;
        let (p, q) = if forward { (pf, qf) } else { (pt, qt) };
        let y = num_complex::Complex64::new(br.r_pu, br.x_pu).inv();
        let row = e.row_mut(k);
        if mask[*src] {
            let t = tiers[*src];
            row[0] = apply_noise(p, t.p_rate, draw());
            row[1] = apply_noise(q, t.q_rate, draw());
            row[2] = t.p_rate * p.abs();
            row[3] = t.q_rate * q.abs();
        }
        row[4] = y.re;
        row[5] = y.im;
        row[6] = if forward { br.shift_rad } else { -br.shift_rad };
        row[7] = if br.transformer { 1.0 } else { 0.0 };
        row[8] = 1.0;
    }

    let mut labels = Tensor::zeros(n, 2);
    for i in 0..n {
        labels.set(i, 0, solution.v_mag[i]);
        labels.set(i, 1, solution.v_ang[i]);
    }
    Ok(GraphSample {
        topology_id,
        timestep,
        node_features: x,
        edge_features: e,
        edges,
        edge_branch,
        measured_mask: mask.to_vec(),
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random permutation cut at 80% / 90%.
pub fn split_dataset<R: Rng>(n_samples: usize, rng: &mut R) -> Result<DatasetSplit, MeasurementError> {
    if n_samples < 10 {
        return Err(MeasurementError::TooFewSamples(n_samples));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(rng);
    let a = n_samples * 8 / 10;
    let b = n_samples * 9 / 10;
    Ok(DatasetSplit {
        train: idx[..a].to_vec(),
        val: idx[a..b].to_vec(),
        test: idx[b..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_synthetic_grid, GridKind};
    use crate::powerflow::{solve_power_flow, DEFAULT_MAX_ITER, DEFAULT_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn profiles_stay_in_range_and_repeat() {
        let a = generate_profiles(10, 1, &mut rng(3));
        assert!(a.p[0].iter().all(|&p| (0.0..=MAX_LOAD_PU).contains(&p)));
        let b = generate_profiles(10, 50, &mut rng(3));
        let c = generate_profiles(10, 50, &mut rng(3));
        assert_eq!(b, c);
        for (pt, qt) in b.p.iter().zip(&b.q) {
            for (p, q) in pt.iter().zip(qt) {
                assert!(*q >= 0.2 * p - 1e-15 && *q <= 0.5 * p + 1e-15);
            }
        }
    }

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        let cov: f64 = x.windows(lag + 1).map(|w| (w[0] - m) * (w[lag] - m)).sum();
        cov / var
    }

    #[test]
    fn daily_lag_correlates_more_than_half_day() {
        let prof = generate_profiles(5, 96 * 10, &mut rng(11));
        for bus in 0..5 {
            let series: Vec<f64> = prof.p.iter().map(|pt| pt[bus]).collect();
            assert!(autocorr(&series, 96) > autocorr(&series, 48));
        }
    }

    #[test]
    fn mask_counts() {
        let g = build_synthetic_grid(GridKind::Radial, 99, 1).unwrap();
        let m = select_measured_buses(&g, 0.2, &mut rng(1)).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 20);
        assert!(m[0]);
        let all = select_measured_buses(&g, 1.0, &mut rng(1)).unwrap();
        assert!(all.iter().all(|&b| b));
        let none = select_measured_buses(&g, 0.0, &mut rng(1)).unwrap();
        assert_eq!(none.iter().filter(|&&b| b).count(), 1);
        assert!(none[0]);
        assert!(select_measured_buses(&g, 1.5, &mut rng(1)).is_err());
        assert_eq!(measured_count(10, 0.3), 3);
        assert_eq!(measured_count(15, 0.9), 14);
    }

    #[test]
    fn noise_rules() {
        assert_eq!(apply_noise(0.97, 0.0, 1.3), 0.97);
        assert_eq!(apply_angle_noise(0.0, 0.005, 1.0), 0.005 * ANGLE_NOISE_FLOOR);
        let mut r = rng(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| apply_noise(1.0, 0.002, StandardNormal.sample(&mut r)) - 1.0)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.002).abs() / 0.002 < 0.1, "std {std}");
    }

    #[test]
    fn tier_assignment_follows_voltage_level() {
        let g = build_synthetic_grid(GridKind::Radial, 20, 2).unwrap();
        assert!(bus_tiers(&g, TierAssignment::Mv).iter().all(|t| *t == NoiseTier::DIGIONS));
        let lv = bus_tiers(&g, TierAssignment::Lv);
        for (i, t) in lv.iter().enumerate() {
            let at_transformer = g.branches.iter().any(|b| b.transformer && b.touches(i));
            assert_eq!(*t == NoiseTier::DIGIONS, at_transformer);
        }
        assert!(lv.contains(&NoiseTier::IMSYS));
    }

    fn solved(seed: u64) -> (Grid, PowerFlowSolution) {
        let g = build_synthetic_grid(GridKind::Meshed, 12, seed).unwrap();
        let prof = generate_profiles(12, 1, &mut rng(seed));
        let sol = solve_power_flow(&g, &prof.p[0], &prof.q[0], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        (g, sol)
    }

    #[test]
    fn sample_layout_and_masking() {
        let (g, sol) = solved(4);
        let mask = select_measured_buses(&g, 0.5, &mut rng(9)).unwrap();
        let tiers = bus_tiers(&g, TierAssignment::Lv);
        let s = assemble_sample(&g, 0, &sol, &mask, &tiers, 24, &mut rng(1)).unwrap();
        assert_eq!(s.node_features.cols(), 9);
        assert_eq!(s.edge_features.rows(), 2 * g.closed_branches().count());
        for i in 0..12 {
            let row = s.node_features.row(i);
            if !mask[i] {
                assert!(row[..5].iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(row[4], 1.0);
            }
            assert_eq!(row[5], if i == 0 { 1.0 } else { 0.0 });
            assert_eq!(s.labels.get(i, 0), sol.v_mag[i]);
            assert_eq!(s.labels.get(i, 1), sol.v_ang[i]);
        }
        assert_eq!(s.labels.get(0, 1), 0.0);
        // quarter day
        assert!((s.node_features.get(3, 7) - 1.0).abs() < 1e-12);
        for (k, &bid) in s.edge_branch.iter().enumerate() {
            assert!(g.branches[bid].closed);
            assert_eq!(s.edge_features.get(k, 8), 1.0);
        }
    }

    #[test]
    fn open_branches_are_absent() {
        let g = build_synthetic_grid(GridKind::Meshed, 12, 4).unwrap();
        let red = crate::grid::list_redundant_lines(&g).unwrap();
        let open = *red.iter().next().unwrap();
        let mut states = g.switch_states();
        states[open] = false;
        let g2 = g.with_switch_states(&states);
        let z = vec![0.01; 12];
        let sol = solve_power_flow(&g2, &z, &z, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let mask = vec![true; 12];
        let s = assemble_sample(&g2, 1, &sol, &mask, &bus_tiers(&g2, TierAssignment::Mv), 0, &mut rng(0)).unwrap();
        assert!(!s.edge_branch.contains(&open));
        assert_eq!(s.edges.len(), 2 * (g.n_branches() - 1));
    }

    #[test]
    fn non_converged_solution_is_rejected() {
        let (g, mut sol) = solved(2);
        sol.converged = false;
        let mask = vec![true; 12];
        let err = assemble_sample(&g, 0, &sol, &mask, &bus_tiers(&g, TierAssignment::Mv), 7, &mut rng(0));
        assert!(matches!(err, Err(MeasurementError::Rejected { timestep: 7, .. })));
    }

    #[test]
    fn flows_measured_from_source_side() {
        let (g, sol) = solved(6);
        let mask: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let s = assemble_sample(&g, 0, &sol, &mask, &vec![NoiseTier::EXACT; 12], 0, &mut rng(0)).unwrap();
        let flows = branch_flows(&g, &sol);
        for (k, &(src, _)) in s.edges.iter().enumerate() {
            let bid = s.edge_branch[k];
            let f = flows.iter().find(|f| f.0 == bid).unwrap();
            let expected = if src == g.branches[bid].from { f.1 } else { f.3 };
            if mask[src] {
                assert_eq!(s.edge_features.get(k, 0), expected);
            } else {
                assert_eq!(s.edge_features.get(k, 0), 0.0);
            }
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let s = split_dataset(100, &mut rng(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = split_dataset(10, &mut rng(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert!(matches!(split_dataset(9, &mut rng(1)), Err(MeasurementError::TooFewSamples(9))));
        let s = split_dataset(57, &mut rng(2)).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }
}
