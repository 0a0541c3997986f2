//! Bus admittance assembly and Newton-Raphson AC power flow in polar form.
//!
//! All non-slack buses are constant-power (PQ) loads; the slack bus is held
//! at `1.0 p.u. / 0 rad`. The solver starts flat and solves each Newton
//! step with a dense LU factorisation with partial pivoting.

use crate::grid::{Grid, GridError};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 30;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("branch {0} has zero impedance")]
    SingularBranch(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid power-flow input: {0}")]
    InvalidInput(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Dense complex bus admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.n + j]
    }

    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.n + j] += v;
    }

    /// `I = Y V`.
    pub fn currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(v)
                    .map(|(y, vj)| y * vj)
                    .sum()
            })
            .collect()
    }

    /// Complex power injections `S_i = V_i conj((Y V)_i)`.
    pub fn injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.currents(v)
            .into_iter()
            .zip(v)
            .map(|(i, vi)| vi * i.conj())
            .collect()
    }
}

/// Series admittance terms `(y_ff, y_ft, y_tf, y_tt)` of a branch with an
/// ideal phase shifter of unit ratio on its `from` side.
pub fn branch_terms(r_pu: f64, x_pu: f64, shift_rad: f64) -> Option<[Complex64; 4]> {
    let z = Complex64::new(r_pu, x_pu);
    if z.norm() == 0.0 {
        return None;
    }
    let y = z.inv();
    let tap = Complex64::from_polar(1.0, shift_rad);
    Some([y, -y / tap.conj(), -y / tap, y])
}

/// Y-bus over closed branches; open branches contribute nothing.
pub fn build_admittance(grid: &Grid) -> Result<AdmittanceMatrix, PowerFlowError> {
    let n = grid.n_buses();
    let mut y = AdmittanceMatrix {
        n,
        data: vec![Complex64::new(0.0, 0.0); n * n],
    };
    for br in grid.closed_branches() {
        let [yff, yft, ytf, ytt] =
            branch_terms(br.r_pu, br.x_pu, br.shift_rad).ok_or(PowerFlowError::SingularBranch(br.id))?;
        y.add(br.from, br.from, yff);
        y.add(br.from, br.to, yft);
        y.add(br.to, br.from, ytf);
        y.add(br.to, br.to, ytt);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Net injections; loads appear negative.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Infinity norm of the PQ mismatch before each Newton step and at exit.
    pub mismatch_history: Vec<f64>,
    pub diagnostic: Option<String>,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }
}

/// Newton-Raphson solve for constant-power loads `p_load`, `q_load`
/// (positive = consumption). Exceeding `max_iter` or hitting a singular
/// Jacobian returns `converged = false` rather than an error.
pub fn solve_power_flow(
    grid: &Grid,
    p_load: &[f64],
    q_load: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = grid.n_buses();
    if p_load.len() != n || q_load.len() != n {
        return Err(PowerFlowError::InvalidInput(format!(
            "load vectors have lengths {}/{} for {n} buses",
            p_load.len(),
            q_load.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(PowerFlowError::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    grid.validate()?;
    let ybus = build_admittance(grid)?;
    let slack = grid.slack;
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let p_spec: Vec<f64> = p_load.iter().map(|p| -p).collect();
    let q_spec: Vec<f64> = q_load.iter().map(|q| -q).collect();

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    let mut history = Vec::new();
    let mut diagnostic = None;
    let mut converged = false;
    let mut iterations = 0;

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<Complex64>, DVector<f64>) {
        let v: Vec<Complex64> = vm.iter().zip(va).map(|(&a, &b)| Complex64::from_polar(a, b)).collect();
        let s = ybus.injections(&v);
        let mut f = DVector::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            f[k] = p_spec[i] - s[i].re;
            f[m + k] = q_spec[i] - s[i].im;
        }
        (s, f)
    };

    loop {
        let (s, f) = mismatch(&vm, &va);
        let norm = f.amax();
        history.push(norm);
        if !norm.is_finite() {
            diagnostic = Some(format!("mismatch became non-finite at iteration {iterations}"));
            break;
        }
        if norm < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            diagnostic = Some(format!("no convergence after {max_iter} iterations (mismatch {norm:.3e})"));
            break;
        }
        let jac = jacobian(&ybus, &pq, &vm, &va, &s);
        let Some(dx) = jac.lu().solve(&f) else {
            diagnostic = Some(format!("singular Jacobian at iteration {iterations}"));
            break;
        };
        for (k, &i) in pq.iter().enumerate() {
            va[i] += dx[k];
            vm[i] += dx[m + k];
        }
        iterations += 1;
    }

    let v: Vec<Complex64> = vm.iter().zip(&va).map(|(&a, &b)| Complex64::from_polar(a, b)).collect();
    let s = ybus.injections(&v);
    Ok(PowerFlowSolution {
        v_mag: vm,
        v_ang: va,
        p_inj: s.iter().map(|c| c.re).collect(),
        q_inj: s.iter().map(|c| c.im).collect(),
        converged,
        iterations,
        max_mismatch: *history.last().unwrap_or(&f64::NAN),
        mismatch_history: history,
        diagnostic,
    })
}

fn jacobian(ybus: &AdmittanceMatrix, pq: &[usize], vm: &[f64], va: &[f64], s: &[Complex64]) -> DMatrix<f64> {
    let m = pq.len();
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            let y = ybus.get(i, k);
            let (g, b) = (y.re, y.im);
            if i == k {
                let (p, q) = (s[i].re, s[i].im);
                let v2 = vm[i] * vm[i];
                j[(r, c)] = -q - b * v2;
                j[(r, m + c)] = p / vm[i] + g * vm[i];
                j[(m + r, c)] = p - g * v2;
                j[(m + r, m + c)] = q / vm[i] - b * vm[i];
            } else {
                if y.norm() == 0.0 {
                    continue;
                }
                let t = va[i] - va[k];
                let (st, ct) = t.sin_cos();
                let vv = vm[i] * vm[k];
                j[(r, c)] = vv * (g * st - b * ct);
                j[(r, m + c)] = vm[i] * (g * ct + b * st);
                j[(m + r, c)] = -vv * (g * ct + b * st);
                j[(m + r, m + c)] = vm[i] * (g * st - b * ct);
            }
        }
    }
    j
}

/// Active/reactive flow leaving each end of every closed branch:
/// `(branch id, p_from, q_from, p_to, q_to)`.
pub fn branch_flows(grid: &Grid, solution: &PowerFlowSolution) -> Vec<(usize, f64, f64, f64, f64)> {
    let v = solution.voltages();
    grid.closed_branches()
        .filter_map(|br| {
            let [yff, yft, ytf, ytt] = branch_terms(br.r_pu, br.x_pu, br.shift_rad)?;
            let (vf, vt) = (v[br.from], v[br.to]);
            let sf = vf * (yff * vf + yft * vt).conj();
            let st = vt * (ytf * vf + ytt * vt).conj();
            Some((br.id, sf.re, sf.im, st.re, st.im))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LoadRow {
    bus_id: usize,
    p_pu: f64,
    q_pu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SolutionRow {
    bus_id: usize,
    v_mag_pu: f64,
    v_ang_rad: f64,
    p_pu: f64,
    q_pu: f64,
}

/// Reads `bus_id,p_pu,q_pu` rows (loads, positive = consumption).
pub fn read_loads_csv(path: &Path, n_buses: usize) -> Result<(Vec<f64>, Vec<f64>), PowerFlowError> {
    let io_err = |message: String| PowerFlowError::Io {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(e.to_string()))?;
    let mut p = vec![0.0; n_buses];
    let mut q = vec![0.0; n_buses];
    for row in rdr.deserialize::<LoadRow>() {
        let row = row.map_err(|e| io_err(e.to_string()))?;
        if row.bus_id >= n_buses {
            return Err(io_err(format!("bus {} out of range", row.bus_id)));
        }
        p[row.bus_id] = row.p_pu;
        q[row.bus_id] = row.q_pu;
    }
    Ok((p, q))
}

/// One row per bus: `bus_id, v_mag_pu, v_ang_rad, p_pu, q_pu` (net injection).
pub fn write_solution_csv(path: &Path, solution: &PowerFlowSolution) -> Result<(), PowerFlowError> {
    let io_err = |message: String| PowerFlowError::Io {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
    for i in 0..solution.v_mag.len() {
        w.serialize(SolutionRow {
            bus_id: i,
            v_mag_pu: solution.v_mag[i],
            v_ang_rad: solution.v_ang[i],
            p_pu: solution.p_inj[i],
            q_pu: solution.q_inj[i],
        })
        .map_err(|e| io_err(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(e.to_string()))
}
