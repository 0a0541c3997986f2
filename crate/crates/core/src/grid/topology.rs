use super::{BranchId, BusId, Grid, GridError};
use std::collections::{BTreeSet, VecDeque};

/// Neighbour lists over closed branches. Parallel branches appear once.
pub fn adjacency(grid: &Grid) -> Vec<Vec<BusId>> {
    let mut adj = vec![Vec::new(); grid.n_buses()];
    for br in grid.closed_branches() {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

fn bfs(adj: &[Vec<BusId>], source: BusId, out: &mut [usize]) {
    out.fill(HopMatrix::UNREACHABLE);
    out[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let next = out[u] + 1;
        for &v in &adj[u] {
            if out[v] == HopMatrix::UNREACHABLE {
                out[v] = next;
                queue.push_back(v);
            }
        }
    }
}

pub fn is_connected(grid: &Grid) -> bool {
    check_connected(grid).is_ok()
}

pub(super) fn check_connected(grid: &Grid) -> Result<(), GridError> {
    let adj = adjacency(grid);
    let mut hops = vec![0; grid.n_buses()];
    bfs(&adj, grid.slack, &mut hops);
    match hops.iter().position(|&h| h == HopMatrix::UNREACHABLE) {
        Some(bus) => Err(GridError::Disconnected(bus)),
        None => Ok(()),
    }
}

/// Unweighted shortest-path lengths over closed branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMatrix {
    n: usize,
    data: Vec<usize>,
}

impl HopMatrix {
    /// Marker for pairs with no connecting path.
    pub const UNREACHABLE: usize = usize::MAX;

    pub fn from_raw(n: usize, data: Vec<usize>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn raw(&self, i: usize, j: usize) -> usize {
        self.data[i * self.n + j]
    }

    /// `None` when `j` is unreachable from `i`.
    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        match self.raw(i, j) {
            Self::UNREACHABLE => None,
            h => Some(h),
        }
    }

    pub fn max_finite(&self) -> usize {
        self.data
            .iter()
            .copied()
            .filter(|&h| h != Self::UNREACHABLE)
            .max()
            .unwrap_or(0)
    }
}

/// All-pairs breadth-first search.
pub fn all_pairs_hops(grid: &Grid) -> HopMatrix {
    let n = grid.n_buses();
    let adj = adjacency(grid);
    let mut data = vec![0; n * n];
    for (i, row) in data.chunks_mut(n).enumerate() {
        bfs(&adj, i, row);
    }
    HopMatrix { n, data }
}

/// Hop counts, scaled distances `s = 1 / (1 + hops)` (zero when
/// unreachable) and hop-shell sizes for one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceData {
    hops: HopMatrix,
    scaled: Vec<f64>,
    shell_counts: Vec<usize>,
}

impl DistanceData {
    pub fn from_hops(hops: HopMatrix) -> Self {
        let n = hops.n();
        let mut scaled = vec![0.0; n * n];
        let mut shell_counts = vec![0; n * n];
        let mut tally = std::collections::HashMap::new();
        for i in 0..n {
            tally.clear();
            for j in 0..n {
                *tally.entry(hops.raw(i, j)).or_insert(0usize) += 1;
            }
            for j in 0..n {
                let h = hops.raw(i, j);
                shell_counts[i * n + j] = tally[&h];
                scaled[i * n + j] = match hops.get(i, j) {
                    Some(h) => 1.0 / (1.0 + h as f64),
                    None => 0.0,
                };
            }
        }
        Self {
            hops,
            scaled,
            shell_counts,
        }
    }

    pub fn n(&self) -> usize {
        self.hops.n()
    }

    pub fn hops(&self) -> &HopMatrix {
        &self.hops
    }

    pub fn hop(&self, i: usize, j: usize) -> Option<usize> {
        self.hops.get(i, j)
    }

    pub fn scaled(&self, i: usize, j: usize) -> f64 {
        self.scaled[i * self.n() + j]
    }

    pub fn shell_count(&self, i: usize, j: usize) -> usize {
        self.shell_counts[i * self.n() + j]
    }

    pub fn max_hop(&self) -> usize {
        self.hops.max_finite()
    }

    /// Relabels buses: new index `k` refers to old bus `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> DistanceData {
        let n = self.n();
        let mut data = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                data[a * n + b] = self.hops.raw(perm[a], perm[b]);
            }
        }
        DistanceData::from_hops(HopMatrix::from_raw(n, data))
    }
}

pub fn distance_data(grid: &Grid) -> DistanceData {
    DistanceData::from_hops(all_pairs_hops(grid))
}

/// Closed branches whose individual removal keeps every bus connected,
/// i.e. closed branches that are not bridges.
pub fn list_redundant_lines(grid: &Grid) -> Result<BTreeSet<BranchId>, GridError> {
    check_connected(grid)?;
    let n = grid.n_buses();
    // incidence lists keyed by branch id so parallel branches stay distinct
    let mut inc: Vec<Vec<(BusId, BranchId)>> = vec![Vec::new(); n];
    for br in grid.closed_branches() {
        inc[br.from].push((br.to, br.id));
        inc[br.to].push((br.from, br.id));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut bridges = BTreeSet::new();
    let mut timer = 0;
    // iterative Tarjan: (node, parent branch, next incidence index)
    let mut stack: Vec<(BusId, Option<BranchId>, usize)> = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        stack.push((root, None, 0));
        while let Some(&mut (u, parent, ref mut next)) = stack.last_mut() {
            if *next < inc[u].len() {
                let (v, e) = inc[u][*next];
                *next += 1;
                if Some(e) == parent {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = timer;
                    low[v] = timer;
                    timer += 1;
                    stack.push((v, Some(e), 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let (Some(e), Some(&(p, _, _))) = (parent, stack.last()) {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        bridges.insert(e);
                    }
                }
            }
        }
    }
    Ok(grid
        .closed_branches()
        .map(|b| b.id)
        .filter(|id| !bridges.contains(id))
        .collect())
}
