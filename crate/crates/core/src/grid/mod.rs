//! Grid model, synthetic grid generation, topology analysis and switching
//! scenarios.

mod scenario;
mod topology;

pub use scenario::{
    generate_switching_scenario, ScenarioStatus, SwitchEvent, SwitchState, SwitchingScenario,
    TopologySeries,
};
pub use topology::{
    adjacency, all_pairs_hops, distance_data, is_connected, list_redundant_lines, DistanceData,
    HopMatrix,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub type BusId = usize;
pub type BranchId = usize;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least 2 buses, got {0}")]
    InvalidSize(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid is disconnected: bus {0} is not supplied")]
    Disconnected(BusId),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusRole {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub vn_pu: f64,
    pub role: BusRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    pub from: BusId,
    pub to: BusId,
    pub r_pu: f64,
    pub x_pu: f64,
    pub closed: bool,
    pub transformer: bool,
    pub shift_rad: f64,
}

impl Branch {
    pub fn touches(&self, bus: BusId) -> bool {
        self.from == bus || self.to == bus
    }

    pub fn other(&self, bus: BusId) -> BusId {
        if self.from == bus {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub slack: BusId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Radial,
    Meshed,
}

impl std::str::FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "radial" => Ok(GridKind::Radial),
            "meshed" => Ok(GridKind::Meshed),
            other => Err(format!("unknown grid kind `{other}` (expected radial|meshed)")),
        }
    }
}

impl std::fmt::Display for GridKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GridKind::Radial => "radial",
            GridKind::Meshed => "meshed",
        })
    }
}

const R_RANGE: (f64, f64) = (0.01, 0.1);
const X_RANGE: (f64, f64) = (0.02, 0.2);

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Random tree by uniform attachment plus extra closed lines.
///
/// Radial grids get `ceil(0.1 n)` extra lines, meshed grids `ceil(0.15 n)`
/// tie lines. Extra lines join non-adjacent buses whenever such a pair
/// exists. Bus 0 is the slack; branches leaving it are flagged as the
/// substation transformer.
pub fn build_synthetic_grid(kind: GridKind, n_buses: usize, seed: u64) -> Result<Grid, GridError> {
    if n_buses < 2 {
        return Err(GridError::InvalidSize(n_buses));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = (0..n_buses)
        .map(|id| Bus {
            id,
            vn_pu: 1.0,
            role: if id == 0 { BusRole::Slack } else { BusRole::Pq },
        })
        .collect();

    let mut pairs: Vec<(BusId, BusId)> = (1..n_buses).map(|i| (rng.gen_range(0..i), i)).collect();
    let extra = match kind {
        GridKind::Radial => (0.1 * n_buses as f64).ceil() as usize,
        GridKind::Meshed => (0.15 * n_buses as f64).ceil() as usize,
    };
    let mut adjacent = vec![vec![false; n_buses]; n_buses];
    for &(a, b) in &pairs {
        adjacent[a][b] = true;
        adjacent[b][a] = true;
    }
    for _ in 0..extra {
        let candidates: Vec<(BusId, BusId)> = (0..n_buses)
            .flat_map(|a| (a + 1..n_buses).map(move |b| (a, b)))
            .filter(|&(a, b)| !adjacent[a][b])
            .collect();
        let (a, b) = if candidates.is_empty() {
            let a = rng.gen_range(0..n_buses);
            let mut b = rng.gen_range(0..n_buses - 1);
            if b >= a {
                b += 1;
            }
            (a.min(b), a.max(b))
        } else {
            candidates[rng.gen_range(0..candidates.len())]
        };
        adjacent[a][b] = true;
        adjacent[b][a] = true;
        pairs.push((a, b));
    }

    let branches = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (from, to))| Branch {
            id,
            from,
            to,
            r_pu: log_uniform(&mut rng, R_RANGE),
            x_pu: log_uniform(&mut rng, X_RANGE),
            closed: true,
            transformer: from == 0 || to == 0,
            shift_rad: 0.0,
        })
        .collect();
    let grid = Grid {
        buses,
        branches,
        slack: 0,
    };
    grid.validate()?;
    Ok(grid)
}

impl Grid {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn closed_branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.closed)
    }

    pub fn switch_states(&self) -> Vec<bool> {
        self.branches.iter().map(|b| b.closed).collect()
    }

    /// Copy of the grid with the given per-branch switch states.
    pub fn with_switch_states(&self, closed: &[bool]) -> Grid {
        let mut g = self.clone();
        for (b, &c) in g.branches.iter_mut().zip(closed) {
            b.closed = c;
        }
        g
    }

    /// Checks structural invariants and connectivity of the closed subgraph.
    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.buses.len();
        if n < 2 {
            return Err(GridError::InvalidSize(n));
        }
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.id != i {
                return Err(GridError::InvalidGrid(format!(
                    "bus ids must be 0..{n} in order, found {} at position {i}",
                    bus.id
                )));
            }
        }
        let slacks: Vec<BusId> = self
            .buses
            .iter()
            .filter(|b| b.role == BusRole::Slack)
            .map(|b| b.id)
            .collect();
        if slacks != [self.slack] {
            return Err(GridError::InvalidGrid(format!(
                "expected exactly one slack bus ({}), found {:?}",
                self.slack, slacks
            )));
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.id != i {
                return Err(GridError::InvalidGrid(format!(
                    "branch ids must be sequential, found {} at position {i}",
                    br.id
                )));
            }
            if br.from >= n || br.to >= n {
                return Err(GridError::InvalidGrid(format!(
                    "branch {} references missing bus",
                    br.id
                )));
            }
            if br.from == br.to {
                return Err(GridError::InvalidGrid(format!("branch {} is a self-loop", br.id)));
            }
            if !(br.r_pu >= 0.0) || br.x_pu == 0.0 || !br.x_pu.is_finite() {
                return Err(GridError::InvalidGrid(format!(
                    "branch {} has invalid impedance r={} x={}",
                    br.id, br.r_pu, br.x_pu
                )));
            }
        }
        topology::check_connected(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialises")
    }

    pub fn from_json(text: &str) -> Result<Grid, GridError> {
        let grid: Grid = serde_json::from_str(text).map_err(|e| GridError::Parse {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_json()).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Grid, GridError> {
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Grid::from_json(&text).map_err(|e| match e {
            GridError::Parse { message, .. } => GridError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}
