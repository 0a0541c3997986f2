//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use gridmp_core::diff::{ParamStore, Tensor};
use gridmp_core::grid::{build_synthetic_grid, Grid, GridKind};
use gridmp_core::harness::Prepared;
use gridmp_core::measurement::{build_dataset, Dataset, DatasetConfig, TierAssignment};
use gridmp_core::models::{Batch, Estimator, ModelInput, ModelKind};
use gridmp_core::powerflow::build_admittance;
use num_complex::Complex64;

/// Plain Gauss-Seidel on the bus voltage equations, iterated to a tight
/// fixed point. Shares nothing with the Newton solver except the Y-bus.
pub fn gauss_seidel(grid: &Grid, p_load: &[f64], q_load: &[f64]) -> Vec<Complex64> {
    let y = build_admittance(grid).unwrap();
    let n = grid.n_buses();
    let mut v = vec![Complex64::new(1.0, 0.0); n];
    for _ in 0..2_000_000 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            if i == grid.slack {
                continue;
            }
            let s = Complex64::new(-p_load[i], -q_load[i]);
            let mut acc = (s / v[i]).conj();
            for j in 0..n {
                if j != i {
                    acc -= y.get(i, j) * v[j];
                }
            }
            let next = acc / y.get(i, i);
            delta = delta.max((next - v[i]).norm());
            v[i] = next;
        }
        if delta < 1e-14 {
            return v;
        }
    }
    panic!("Gauss-Seidel oracle did not settle");
}

/// Hop counts by Floyd-Warshall over closed branches; `usize::MAX` marks
/// unreachable pairs.
pub fn floyd_warshall(grid: &Grid) -> Vec<Vec<usize>> {
    let n = grid.n_buses();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for b in grid.branches.iter().filter(|b| b.closed) {
        d[b.from][b.to] = 1;
        d[b.to][b.from] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    for row in d.iter_mut() {
        for v in row.iter_mut() {
            if *v >= inf {
                *v = usize::MAX;
            }
        }
    }
    d
}

/// A small dataset on a 5-bus radial grid with at least two topologies
/// when the scenario allows it.
pub fn five_bus(timesteps: usize, seed: u64) -> (Dataset, Prepared) {
    let grid = build_synthetic_grid(GridKind::Radial, 5, seed).unwrap();
    let cfg = DatasetConfig {
        n_timesteps: timesteps,
        penetration: 0.6,
        seed,
        tiers: TierAssignment::Lv,
        load_scale: None,
    };
    let d = build_dataset(&grid, &cfg).unwrap();
    let p = Prepared::new(&d).unwrap();
    (d, p)
}

/// Up to `count` samples covering as many topologies as possible.
pub fn diverse_inputs(p: &Prepared, count: usize) -> Vec<&ModelInput> {
    let mut out: Vec<&ModelInput> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for inp in &p.inputs {
        if seen.insert(inp.topology.id) {
            out.push(inp);
        }
    }
    for inp in &p.inputs {
        if out.len() >= count {
            break;
        }
        if !out.iter().any(|o| std::ptr::eq(*o, inp)) {
            out.push(inp);
        }
    }
    out.truncate(count);
    out
}

pub fn estimator(p: &Prepared, kind: ModelKind, seed: u64) -> Estimator {
    Estimator::new(p.model_config(kind, seed)).unwrap()
}

/// Relative error `||a - fd|| / max(||a||, ||fd||, floor)` of one parameter
/// tensor's analytic gradient against central differences. `floor` is
/// `1e-6` times the norm of the whole model gradient: a tensor whose
/// gradient is a millionth of the model's sits below the rounding noise of
/// any difference quotient, so it is held to an absolute bound instead.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
}

/// The training loss written in standardized residuals,
/// `mean_{i,c} (sigma_c w_c (raw_ic - (y_ic - mu_c) / sigma_c))^2` with
/// `w = (1, 0.1)`. Algebraically the model loss, but it avoids forming
/// predictions near 1 p.u. whose rounding would swamp tiny differences.
pub fn standardized_loss(est: &Estimator, batch: &Batch) -> f64 {
    let mut tape = gridmp_core::diff::Tape::new();
    let bind = est.params().bind_frozen(&mut tape);
    let raw = est.forward_raw(&mut tape, &bind, batch).unwrap();
    let raw = tape.value(raw);
    let cfg = est.config();
    let weight = [1.0, 0.1];
    let mut total = 0.0;
    for i in 0..raw.rows() {
        for c in 0..2 {
            let target = (batch.y.get(i, c) - cfg.label_mean[c]) / cfg.label_std[c];
            let r = cfg.label_std[c] * weight[c] * (raw.get(i, c) - target);
            total += r * r;
        }
    }
    total / (2 * raw.rows()) as f64
}

/// Central finite differences on the entries of every parameter tensor.
/// Each entry is differenced at every step in `steps` and the closest
/// agreement is kept: large steps straddle activation kinks, small steps
/// drown nearly cancelling gradients in forward rounding, and an incorrect
/// analytic entry disagrees with all of them. Steps after one that already
/// agrees to `1e-7` of the entry or the tensor's RMS gradient are skipped. Tensors above `full_limit` entries are split into
/// `parts` interleaved slices and only slice `part` is checked, so a
/// sweep over `part = 0..parts` covers every entry once.
pub fn finite_difference_check(
    est: &mut Estimator,
    batch: &Batch,
    steps: &[f64],
    full_limit: usize,
    part: usize,
    parts: usize,
) -> Vec<GradCheck> {
    est.loss_and_grad(batch).unwrap();
    let ids: Vec<_> = est.params().ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| est.params().grad(id).unwrap().clone()).collect();
    let floor = 1e-6 * analytic.iter().map(|g| g.frobenius_sq()).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for (&id, ga) in ids.iter().zip(&analytic) {
        let len = ga.len();
        let entries: Vec<usize> = if len <= full_limit {
            (0..len).collect()
        } else {
            (part..len).step_by(parts).collect()
        };
        let scale = (ga.frobenius_sq() / len as f64).sqrt();
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_n = 0.0;
        for &k in &entries {
            let orig = est.params().value(id).data()[k];
            let a = ga.data()[k];
            let mut fd = f64::NAN;
            for &h in steps {
                est.params_mut().value_mut(id).data_mut()[k] = orig + h;
                let lp = standardized_loss(est, batch);
                est.params_mut().value_mut(id).data_mut()[k] = orig - h;
                let lm = standardized_loss(est, batch);
                est.params_mut().value_mut(id).data_mut()[k] = orig;
                let d = (lp - lm) / (2.0 * h);
                if fd.is_nan() || (a - d).abs() < (a - fd).abs() {
                    fd = d;
                }
                if (a - fd).abs() <= 1e-7 * a.abs().max(scale) {
                    break;
                }
            }
            num += (a - fd) * (a - fd);
            den_a += a * a;
            den_n += fd * fd;
        }
        let den = den_a.max(den_n).sqrt().max(floor);
        let rel_err = if den == 0.0 { num.sqrt() } else { num.sqrt() / den };
        out.push(GradCheck {
            name: est.params().name(id).to_string(),
            checked: entries.len(),
            rel_err,
        });
    }
    out
}

fn tanh(v: f64) -> f64 {
    v.tanh()
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.01 * v
    }
}

/// Evaluates the dense stack `{prefix}.l0 ..` stored in `store` on one input
/// row, straight from the parameter values.
pub fn eval_mlp(store: &ParamStore, prefix: &str, act: fn(f64) -> f64, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut l = 0;
    loop {
        let (Some(w), Some(b)) = (store.id(&format!("{prefix}.l{l}.w")), store.id(&format!("{prefix}.l{l}.b"))) else {
            break;
        };
        let (w, b) = (store.value(w), store.value(b));
        let mut y: Vec<f64> = (0..w.cols())
            .map(|o| b.get(0, o) + (0..w.rows()).map(|i| x[i] * w.get(i, o)).sum::<f64>())
            .collect();
        l += 1;
        let last = store.id(&format!("{prefix}.l{l}.w")).is_none();
        if !last {
            y = y.into_iter().map(act).collect();
        }
        x = y;
    }
    assert!(l > 0, "no layers under `{prefix}`");
    x
}

fn shell_counts(hops: &[Vec<usize>]) -> Vec<Vec<usize>> {
    hops.iter()
        .map(|row| row.iter().map(|h| row.iter().filter(|x| *x == h).count()).collect())
        .collect()
}

fn readout(est: &Estimator, raw: Vec<[f64; 2]>) -> Tensor {
    let c = est.config();
    Tensor::from_fn(raw.len(), 2, |i, ch| c.label_mean[ch] + c.label_std[ch] * raw[i][ch])
}

/// Literal double loop over `y_ic = sum_k sum_j rho(s_ij) / n_ij f_kc(x_jk)`
/// on a single sample with the given hop matrix.
pub fn gnan_oracle(est: &Estimator, input: &ModelInput, hops: &[Vec<usize>]) -> Tensor {
    let store = est.params();
    let n = input.n();
    let counts = shell_counts(hops);
    let mut raw = vec![[0.0; 2]; n];
    for (i, out) in raw.iter_mut().enumerate() {
        for k in 0..input.x.cols() {
            for j in 0..n {
                if hops[i][j] == usize::MAX {
                    continue;
                }
                let s = 1.0 / (1.0 + hops[i][j] as f64);
                let rho = eval_mlp(store, "rho", tanh, &[s])[0];
                let f = eval_mlp(store, &format!("f{k}"), tanh, &[input.x.get(j, k)]);
                for c in 0..2 {
                    out[c] += rho / counts[i][j] as f64 * f[c];
                }
            }
        }
    }
    readout(est, raw)
}

/// Entry `(i, j)` of the edge-conditioned operator for channel `c`, from
/// the case split on adjacency: edge network on the (averaged) edge
/// features of `j -> i`, the learned self edge on the diagonal, the hop
/// network beyond, nothing past 50 hops.
pub fn skp_gnan_entry(est: &Estimator, input: &ModelInput, hops: &[Vec<usize>], c: usize, i: usize, j: usize) -> f64 {
    let store = est.params();
    let h = hops[i][j];
    if h == usize::MAX || h > 50 {
        return 0.0;
    }
    let rho = eval_mlp(store, &format!("rho{c}"), tanh, &[1.0 / (1.0 + h as f64)])[0];
    let weight = match h {
        0 => {
            let e = store.value(store.id("self_edge").unwrap()).data().to_vec();
            eval_mlp(store, &format!("edge{c}"), leaky, &e)[0]
        }
        1 => {
            let ws: Vec<f64> = input
                .topology
                .edges
                .iter()
                .enumerate()
                .filter(|(_, &(s, d))| s == j && d == i)
                .map(|(k, _)| eval_mlp(store, &format!("edge{c}"), leaky, input.e.row(k))[0])
                .collect();
            ws.iter().sum::<f64>() / ws.len() as f64
        }
        _ => eval_mlp(store, &format!("hop{c}"), leaky, &[h as f64 / 50.0])[0],
    };
    rho * weight
}

/// Literal double loop for the edge-conditioned additive model.
pub fn skp_gnan_oracle(est: &Estimator, input: &ModelInput, hops: &[Vec<usize>]) -> Tensor {
    let store = est.params();
    let n = input.n();
    let counts = shell_counts(hops);
    let mut raw = vec![[0.0; 2]; n];
    for (i, out) in raw.iter_mut().enumerate() {
        for c in 0..2 {
            for j in 0..n {
                let w = skp_gnan_entry(est, input, hops, c, i, j);
                if w == 0.0 {
                    continue;
                }
                for k in 0..input.x.cols() {
                    let f = eval_mlp(store, &format!("f{k}"), tanh, &[input.x.get(j, k)]);
                    out[c] += w / counts[i][j] as f64 * f[c];
                }
            }
        }
    }
    readout(est, raw)
}

pub fn hops_of(input: &ModelInput) -> Vec<Vec<usize>> {
    let n = input.n();
    (0..n)
        .map(|i| (0..n).map(|j| input.topology.dist.hop(i, j).unwrap_or(usize::MAX)).collect())
        .collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
