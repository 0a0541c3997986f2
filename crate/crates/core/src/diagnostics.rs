//! Dirichlet energy and Rayleigh quotient of node representations, layer
//! traces for attention models and learned distance curves for additive
//! models.

use crate::diff::Tensor;
use crate::models::{Estimator, ModelError, ModelInput};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("Rayleigh quotient is undefined for an all-zero feature matrix")]
    ZeroFeatures,
    #[error("shape mismatch: features have {rows} rows, Laplacian is {n}x{n}")]
    Shape { rows: usize, n: usize },
    #[error("no samples to trace")]
    Empty,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DiagnosticsError {
    DiagnosticsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Unweighted adjacency of a topology from its directed edge list;
/// parallel edges and self pairs collapse.
pub fn adjacency_matrix(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for &(s, d) in edges {
        if s != d {
            a.set(s, d, 1.0);
            a.set(d, s, 1.0);
        }
    }
    a
}

/// `I - D^-1/2 A D^-1/2` on nodes with positive degree; isolated nodes get
/// a zero row and column.
pub fn sym_normalized_laplacian(adjacency: &Tensor) -> Tensor {
    let n = adjacency.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let diag = if i == j && inv_sqrt[i] > 0.0 { 1.0 } else { 0.0 };
        diag - inv_sqrt[i] * adjacency.get(i, j) * inv_sqrt[j]
    })
}

fn check(x: &Tensor, lap: &Tensor) -> Result<(), DiagnosticsError> {
    if x.rows() != lap.rows() {
        return Err(DiagnosticsError::Shape {
            rows: x.rows(),
            n: lap.rows(),
        });
    }
    Ok(())
}

/// `tr(X^T L X)`.
pub fn dirichlet_energy(x: &Tensor, lap: &Tensor) -> Result<f64, DiagnosticsError> {
    check(x, lap)?;
    let lx = lap.matmul(x);
    Ok(x.data().iter().zip(lx.data()).map(|(a, b)| a * b).sum())
}

/// `tr(X^T L X) / ||X||_F^2`.
pub fn rayleigh_quotient(x: &Tensor, lap: &Tensor) -> Result<f64, DiagnosticsError> {
    check(x, lap)?;
    let norm = x.frobenius_sq();
    if norm == 0.0 {
        return Err(DiagnosticsError::ZeroFeatures);
    }
    Ok(dirichlet_energy(x, lap)? / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub dirichlet_energy: f64,
    pub rayleigh_quotient: f64,
}

/// Statistics of the input (layer 0) and every layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layers: Vec<LayerStat>,
}

/// Traces an attention model on one sample using that sample's topology.
/// An all-zero layer output reports a quotient of 0.
pub fn trace_layers(model: &Estimator, input: &ModelInput) -> Result<LayerTrace, DiagnosticsError> {
    let embeddings = model.layer_embeddings(input)?;
    let lap = sym_normalized_laplacian(&adjacency_matrix(input.n(), &input.topology.edges));
    let layers = embeddings
        .iter()
        .enumerate()
        .map(|(layer, x)| {
            let de = dirichlet_energy(x, &lap)?;
            let rq = match rayleigh_quotient(x, &lap) {
                Err(DiagnosticsError::ZeroFeatures) => 0.0,
                other => other?,
            };
            Ok(LayerStat {
                layer,
                dirichlet_energy: de,
                rayleigh_quotient: rq,
            })
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    Ok(LayerTrace { layers })
}

/// Per-layer mean of [`trace_layers`] over several samples.
pub fn mean_trace(model: &Estimator, inputs: &[&ModelInput]) -> Result<LayerTrace, DiagnosticsError> {
    let mut acc: Option<LayerTrace> = None;
    for input in inputs {
        let t = trace_layers(model, input)?;
        match acc.as_mut() {
            None => acc = Some(t),
            Some(a) => {
                for (x, y) in a.layers.iter_mut().zip(&t.layers) {
                    x.dirichlet_energy += y.dirichlet_energy;
                    x.rayleigh_quotient += y.rayleigh_quotient;
                }
            }
        }
    }
    let mut trace = acc.ok_or(DiagnosticsError::Empty)?;
    let n = inputs.len() as f64;
    for l in &mut trace.layers {
        l.dirichlet_energy /= n;
        l.rayleigh_quotient /= n;
    }
    Ok(trace)
}

/// Writes `layer,dirichlet_energy,rayleigh_quotient` rows.
pub fn write_trace_csv(path: &Path, trace: &LayerTrace) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for l in &trace.layers {
        w.serialize(l).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct CurveRow {
    hop: usize,
    s: f64,
    weight: f64,
}

/// Writes `hop,s,weight` rows for one channel of `curve`.
pub fn write_curve_csv(path: &Path, curve: &DistanceCurve, channel: usize) -> Result<(), DiagnosticsError> {
    let weights = curve.channels.get(channel).ok_or_else(|| io_err(path, format!("no channel {channel}")))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for ((&hop, &s), &weight) in curve.hops.iter().zip(&curve.s).zip(weights) {
        w.serialize(CurveRow { hop, s, weight }).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Learned weight per hop, one curve per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCurve {
    pub hops: Vec<usize>,
    /// `1 / (1 + hop)`.
    pub s: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
}

/// Evaluates an additive model's distance function at hops `0..=max_hop`.
/// For the edge-conditioned variant the hop-1 weight uses the mean edge
/// network output over `edge_features`.
pub fn extract_distance_curve(
    model: &Estimator,
    max_hop: usize,
    edge_features: &Tensor,
) -> Result<DistanceCurve, DiagnosticsError> {
    let channels = model.distance_curves(max_hop, edge_features)?;
    Ok(DistanceCurve {
        hops: (0..=max_hop).collect(),
        s: (0..=max_hop).map(|h| 1.0 / (1.0 + h as f64)).collect(),
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_laplacian() {
        let lap = sym_normalized_laplacian(&adjacency_matrix(2, &[(0, 1)]));
        assert_eq!(lap.data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let lap = sym_normalized_laplacian(&adjacency_matrix(3, &[(0, 1)]));
        assert!(lap.row(2).iter().all(|&v| v == 0.0));
        assert!((0..3).all(|i| lap.get(i, 2) == 0.0));
    }

    #[test]
    fn zero_features_have_no_quotient() {
        let lap = sym_normalized_laplacian(&adjacency_matrix(2, &[(0, 1)]));
        assert!(matches!(
            rayleigh_quotient(&Tensor::zeros(2, 1), &lap),
            Err(DiagnosticsError::ZeroFeatures)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let lap = sym_normalized_laplacian(&adjacency_matrix(2, &[(0, 1)]));
        assert!(dirichlet_energy(&Tensor::zeros(3, 1), &lap).is_err());
    }
}
