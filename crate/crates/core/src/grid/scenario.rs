use super::topology::{is_connected, list_redundant_lines};
use super::{BranchId, BusId, Grid, GridError};
use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchState {
    Open,
    Closed,
}

impl SwitchState {
    pub fn is_closed(self) -> bool {
        self == SwitchState::Closed
    }
}

/// State change of one branch, effective from `timestep` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub timestep: usize,
    pub branch: BranchId,
    pub new_state: SwitchState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioStatus {
    Ok,
    /// Nothing can be toggled; the scenario is empty.
    NoRedundantLines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingScenario {
    pub n_timesteps: usize,
    pub selected_buses: Vec<BusId>,
    pub events: Vec<SwitchEvent>,
    pub status: ScenarioStatus,
}

/// Per-timestep topology assignment with distinct topologies listed in
/// order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySeries {
    pub topologies: Vec<Vec<bool>>,
    pub per_timestep: Vec<usize>,
}

/// Draws a reconfiguration schedule on the redundant lines of `grid`.
///
/// Between one and `ceil(0.2 N)` buses are selected. Each selected bus with
/// an incident redundant line has one such line toggled 1 to 10 times at
/// distinct random timesteps. Toggles that would strand a bus (because of
/// earlier openings) are dropped while the schedule is built, so replaying
/// the events never disconnects the grid.
pub fn generate_switching_scenario(
    grid: &Grid,
    n_timesteps: usize,
    seed: u64,
) -> Result<SwitchingScenario, GridError> {
    if n_timesteps == 0 {
        return Err(GridError::InvalidGrid("scenario needs at least one timestep".into()));
    }
    let redundant = list_redundant_lines(grid)?;
    if redundant.is_empty() {
        warn!("grid has no redundant lines; switching scenario is empty");
        return Ok(SwitchingScenario {
            n_timesteps,
            selected_buses: Vec::new(),
            events: Vec::new(),
            status: ScenarioStatus::NoRedundantLines,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n_buses();
    let max_buses = ((0.2 * n as f64).ceil() as usize).max(1);
    let n_selected = rng.gen_range(1..=max_buses);
    let mut selected_buses = sample(&mut rng, n, n_selected).into_vec();
    selected_buses.sort_unstable();

    let mut toggled: BTreeSet<BranchId> = BTreeSet::new();
    let mut candidates: Vec<(usize, BranchId)> = Vec::new();
    for &bus in &selected_buses {
        let incident: Vec<BranchId> = redundant
            .iter()
            .copied()
            .filter(|&id| grid.branches[id].touches(bus))
            .collect();
        if incident.is_empty() {
            continue;
        }
        let line = incident[rng.gen_range(0..incident.len())];
        if !toggled.insert(line) {
            continue;
        }
        let n_events = rng.gen_range(1..=10usize).min(n_timesteps);
        for t in sample(&mut rng, n_timesteps, n_events) {
            candidates.push((t, line));
        }
    }
    candidates.sort_unstable();

    let mut state = grid.switch_states();
    let mut events = Vec::with_capacity(candidates.len());
    for (timestep, branch) in candidates {
        state[branch] = !state[branch];
        if !state[branch] && !is_connected(&grid.with_switch_states(&state)) {
            state[branch] = true;
            continue;
        }
        events.push(SwitchEvent {
            timestep,
            branch,
            new_state: if state[branch] {
                SwitchState::Closed
            } else {
                SwitchState::Open
            },
        });
    }
    Ok(SwitchingScenario {
        n_timesteps,
        selected_buses,
        events,
        status: ScenarioStatus::Ok,
    })
}

impl SwitchingScenario {
    /// Switch states in force at every timestep.
    pub fn states(&self, grid: &Grid) -> Vec<Vec<bool>> {
        let mut state = grid.switch_states();
        let mut out = Vec::with_capacity(self.n_timesteps);
        let mut next = 0;
        for t in 0..self.n_timesteps {
            while next < self.events.len() && self.events[next].timestep <= t {
                let ev = self.events[next];
                state[ev.branch] = ev.new_state.is_closed();
                next += 1;
            }
            out.push(state.clone());
        }
        out
    }

    /// Every intermediate switch configuration, one per applied event.
    pub fn replay(&self, grid: &Grid) -> Vec<Vec<bool>> {
        let mut state = grid.switch_states();
        let mut out = vec![state.clone()];
        for ev in &self.events {
            state[ev.branch] = ev.new_state.is_closed();
            out.push(state.clone());
        }
        out
    }

    pub fn topology_series(&self, grid: &Grid) -> TopologySeries {
        let mut seen: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut topologies = Vec::new();
        let per_timestep = self
            .states(grid)
            .into_iter()
            .map(|s| {
                *seen.entry(s.clone()).or_insert_with(|| {
                    topologies.push(s);
                    topologies.len() - 1
                })
            })
            .collect();
        TopologySeries {
            topologies,
            per_timestep,
        }
    }
}
