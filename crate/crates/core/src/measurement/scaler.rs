use super::GraphSample;
use crate::diff::Tensor;
use serde::{Deserialize, Serialize};

/// Per-column z-score statistics fitted on the training split. Columns
/// with zero spread keep a unit divisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub node_mean: Vec<f64>,
    pub node_std: Vec<f64>,
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

fn column_stats<'a>(mats: impl Iterator<Item = &'a Tensor> + Clone, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    let mut count = 0usize;
    for m in mats.clone() {
        for r in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        count += m.rows();
    }
    if count == 0 {
        return (vec![0.0; cols], vec![1.0; cols]);
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut var = vec![0.0; cols];
    for m in mats {
        for r in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

impl FeatureScaler {
    pub fn fit(samples: &[&GraphSample]) -> FeatureScaler {
        let nf = samples.first().map_or(0, |s| s.node_features.cols());
        let ef = samples.first().map_or(0, |s| s.edge_features.cols());
        let (node_mean, node_std) = column_stats(samples.iter().map(|s| &s.node_features), nf);
        let (edge_mean, edge_std) = column_stats(samples.iter().map(|s| &s.edge_features), ef);
        let (label_mean, label_std) = column_stats(samples.iter().map(|s| &s.labels), 2);
        FeatureScaler {
            node_mean,
            node_std,
            edge_mean,
            edge_std,
            label_mean,
            label_std,
        }
    }

    /// Identity transform for `nf` node and `ef` edge columns.
    pub fn identity(nf: usize, ef: usize) -> FeatureScaler {
        FeatureScaler {
            node_mean: vec![0.0; nf],
            node_std: vec![1.0; nf],
            edge_mean: vec![0.0; ef],
            edge_std: vec![1.0; ef],
            label_mean: vec![0.0; 2],
            label_std: vec![1.0; 2],
        }
    }

    pub fn nodes(&self, x: &Tensor) -> Tensor {
        standardize(x, &self.node_mean, &self.node_std)
    }

    pub fn edges(&self, e: &Tensor) -> Tensor {
        standardize(e, &self.edge_mean, &self.edge_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<f64>) -> GraphSample {
        GraphSample {
            topology_id: 0,
            timestep: 0,
            node_features: Tensor::from_vec(2, 2, x),
            edge_features: Tensor::zeros(0, 1),
            edges: vec![],
            edge_branch: vec![],
            measured_mask: vec![true; 2],
            labels: Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.9, -0.1]),
        }
    }

    #[test]
    fn fitted_training_features_are_standard() {
        let a = sample(vec![1.0, 5.0, 3.0, 5.0]);
        let b = sample(vec![2.0, 5.0, 6.0, 5.0]);
        let sc = FeatureScaler::fit(&[&a, &b]);
        assert_eq!(sc.node_std[1], 1.0);
        let za = sc.nodes(&a.node_features);
        let zb = sc.nodes(&b.node_features);
        let col: Vec<f64> = [za.get(0, 0), za.get(1, 0), zb.get(0, 0), zb.get(1, 0)].to_vec();
        let m = col.iter().sum::<f64>() / 4.0;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert_eq!(za.get(0, 1), 0.0);
        assert_eq!(sc.edge_std, vec![1.0]);
        assert!((sc.label_mean[0] - 0.95).abs() < 1e-12);
    }
}
