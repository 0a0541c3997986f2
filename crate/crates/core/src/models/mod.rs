//! The five estimators and the graph batches they consume.
//!
//! Every model maps a [`Batch`] of standardized node/edge features to
//! per-bus `(v_mag, v_ang)` predictions in physical units. The final affine
//! readout `y = mu + sigma * raw` uses label statistics fixed at
//! construction, so the learned part works on unit-scale targets.

mod gat;
mod gnan;
pub mod kron;
mod mlp;
mod nets;

pub use gat::{skp_layer_generic, Operator};
pub use nets::Activation;

use crate::diff::{Bindings, Checkpoint, DiffError, ParamStore, Tape, Tensor, Var};
use crate::grid::{DistanceData, Grid};
use crate::measurement::{directed_edges, FeatureScaler, GraphSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Relative weight of the angle channel inside the training loss.
pub const ANGLE_LOSS_WEIGHT: f64 = 0.1;
/// Hops beyond this carry no weight in the edge-conditioned GNAN.
pub const SKP_MAX_HOP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "gat")]
    Gat,
    #[serde(rename = "skp-gat")]
    SkpGat,
    #[serde(rename = "gnan")]
    Gnan,
    #[serde(rename = "skp-gnan")]
    SkpGnan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mlp,
        ModelKind::Gat,
        ModelKind::SkpGat,
        ModelKind::Gnan,
        ModelKind::SkpGnan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Gat => "gat",
            ModelKind::SkpGat => "skp-gat",
            ModelKind::Gnan => "gnan",
            ModelKind::SkpGnan => "skp-gnan",
        }
    }

    pub fn is_gnan_family(self) -> bool {
        matches!(self, ModelKind::Gnan | ModelKind::SkpGnan)
    }

    pub fn is_gat_family(self) -> bool {
        matches!(self, ModelKind::Gat | ModelKind::SkpGat)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "gat" | "gatv2" => Ok(ModelKind::Gat),
            "skp-gat" => Ok(ModelKind::SkpGat),
            "gnan" => Ok(ModelKind::Gnan),
            "skp-gnan" => Ok(ModelKind::SkpGnan),
            other => Err(format!(
                "unknown model `{other}` (expected mlp|gat|skp-gat|gnan|skp-gnan)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{model}: non-finite {what}")]
    Numeric { model: ModelKind, what: &'static str },
    #[error("sample has {buses} buses but the model was built for at most {max}")]
    Capacity { buses: usize, max: usize },
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("expected {expected} edge features, got {got}")]
    MissingEdgeFeatures { expected: usize, got: usize },
    #[error("expected {expected} node features, got {got}")]
    NodeFeatures { expected: usize, got: usize },
    #[error("{op} is not supported by {model}")]
    Unsupported { model: ModelKind, op: &'static str },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Architecture and readout settings. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub node_features: usize,
    pub edge_features: usize,
    /// GAT-family layer count and width.
    pub layers: usize,
    pub hidden: usize,
    /// SKP-GAT heads.
    pub heads: usize,
    /// Width of the univariate shape/distance networks.
    pub shape_hidden: usize,
    /// Width of the edge and hop networks.
    pub edge_hidden: usize,
    pub mlp_hidden: usize,
    /// Bus capacity of the flattened MLP input.
    pub max_buses: usize,
    pub seed: u64,
    pub label_mean: [f64; 2],
    pub label_std: [f64; 2],
}

impl ModelConfig {
    pub fn new(kind: ModelKind, node_features: usize, edge_features: usize, max_buses: usize, seed: u64) -> Self {
        ModelConfig {
            kind,
            node_features,
            edge_features,
            layers: 4,
            hidden: 32,
            heads: 3,
            shape_hidden: 16,
            edge_hidden: 16,
            mlp_hidden: 256,
            max_buses,
            seed,
            label_mean: [0.0, 0.0],
            label_std: [1.0, 1.0],
        }
    }

    pub fn with_scaler(mut self, scaler: &FeatureScaler) -> Self {
        self.label_mean = [scaler.label_mean[0], scaler.label_mean[1]];
        self.label_std = [scaler.label_std[0], scaler.label_std[1]];
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.node_features == 0 {
            return bad("node_features must be positive");
        }
        if self.kind.is_gat_family() && (self.layers == 0 || self.hidden == 0) {
            return bad("GAT-family models need at least one layer of positive width");
        }
        if self.kind == ModelKind::SkpGat && self.heads == 0 {
            return bad("SKP-GAT needs at least one head");
        }
        if self.kind == ModelKind::Mlp && (self.max_buses == 0 || self.mlp_hidden == 0) {
            return bad("MLP needs positive bus capacity and width");
        }
        if self.kind.is_gnan_family() && self.shape_hidden == 0 {
            return bad("shape networks need positive width");
        }
        if self.label_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("label_std must be positive");
        }
        Ok(())
    }
}

/// Structure shared by every sample of one switching topology.
#[derive(Debug, Clone)]
pub struct TopologyContext {
    pub id: usize,
    pub n: usize,
    /// Directed `(source, target)` edges, matching the sample edge rows.
    pub edges: Vec<(usize, usize)>,
    pub dist: DistanceData,
}

impl TopologyContext {
    pub fn from_grid(id: usize, grid: &Grid) -> TopologyContext {
        let (edges, _) = directed_edges(grid);
        TopologyContext {
            id,
            n: grid.n_buses(),
            edges,
            dist: crate::grid::distance_data(grid),
        }
    }

    /// Relabeling where new bus `k` is old bus `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> TopologyContext {
        let inv = inverse(perm);
        TopologyContext {
            id: self.id,
            n: self.n,
            edges: self.edges.iter().map(|&(s, d)| (inv[s], inv[d])).collect(),
            dist: self.dist.permuted(perm),
        }
    }
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// One standardized sample ready for a model.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub x: Tensor,
    pub e: Tensor,
    /// Physical labels, `N x 2`.
    pub y: Tensor,
    pub topology: Arc<TopologyContext>,
}

impl ModelInput {
    pub fn new(sample: &GraphSample, scaler: &FeatureScaler, topology: Arc<TopologyContext>) -> Result<ModelInput, ModelError> {
        if topology.edges != sample.edges {
            return Err(ModelError::TopologyMismatch(format!(
                "sample at t={} does not match topology {}",
                sample.timestep, topology.id
            )));
        }
        Ok(ModelInput {
            x: scaler.nodes(&sample.node_features),
            e: scaler.edges(&sample.edge_features),
            y: sample.labels.clone(),
            topology,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn permuted(&self, perm: &[usize]) -> ModelInput {
        ModelInput {
            x: self.x.select_rows(perm),
            e: self.e.clone(),
            y: self.y.select_rows(perm),
            topology: Arc::new(self.topology.permuted(perm)),
        }
    }
}

/// Disjoint union of samples, grouped so samples sharing a topology are
/// contiguous.
#[derive(Debug)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a ModelInput>,
    /// First node row of each graph.
    pub offsets: Vec<usize>,
    pub total_nodes: usize,
    pub x: Tensor,
    pub e: Tensor,
    pub y: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `(first graph, graph count)` runs of a shared topology.
    pub groups: Vec<(usize, usize)>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &[&'a ModelInput]) -> Batch<'a> {
        let mut inputs = inputs.to_vec();
        inputs.sort_by_key(|i| i.topology.id);
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut total = 0;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut groups: Vec<(usize, usize)> = Vec::new();
        for (g, inp) in inputs.iter().enumerate() {
            offsets.push(total);
            for &(s, d) in &inp.topology.edges {
                src.push(total + s);
                dst.push(total + d);
            }
            total += inp.n();
            match groups.last_mut() {
                Some((first, count))
                    if inputs[*first].topology.id == inp.topology.id
                        && inputs[*first].n() == inp.n()
                        && Arc::ptr_eq(&inputs[*first].topology, &inp.topology) =>
                {
                    *count += 1
                }
                _ => groups.push((g, 1)),
            }
        }
        let xs: Vec<&Tensor> = inputs.iter().map(|i| &i.x).collect();
        let es: Vec<&Tensor> = inputs.iter().map(|i| &i.e).collect();
        let ys: Vec<&Tensor> = inputs.iter().map(|i| &i.y).collect();
        let ecols = inputs.first().map_or(0, |i| i.e.cols());
        let e = if es.iter().all(|t| t.rows() == 0) {
            Tensor::zeros(0, ecols)
        } else {
            Tensor::vstack(&es)
        };
        Batch {
            x: Tensor::vstack(&xs),
            e,
            y: Tensor::vstack(&ys),
            inputs,
            offsets,
            total_nodes: total,
            src,
            dst,
            groups,
        }
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Mlp(mlp::MlpNet),
    Gat(gat::GatNet),
    SkpGat(gat::SkpGatNet),
    Gnan(gnan::GnanNet),
    SkpGnan(gnan::SkpGnanNet),
}

/// A model: architecture, parameters and readout.
#[derive(Debug, Clone)]
pub struct Estimator {
    config: ModelConfig,
    store: ParamStore,
    arch: Arch,
}

impl Estimator {
    pub fn new(config: ModelConfig) -> Result<Estimator, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let arch = match config.kind {
            ModelKind::Mlp => Arch::Mlp(mlp::MlpNet::new(&config, &mut store, &mut rng)),
            ModelKind::Gat => Arch::Gat(gat::GatNet::new(&config, &mut store, &mut rng)),
            ModelKind::SkpGat => Arch::SkpGat(gat::SkpGatNet::new(&config, &mut store, &mut rng)),
            ModelKind::Gnan => Arch::Gnan(gnan::GnanNet::new(&config, &mut store, &mut rng)),
            ModelKind::SkpGnan => Arch::SkpGnan(gnan::SkpGnanNet::new(&config, &mut store, &mut rng)),
        };
        Ok(Estimator { config, store, arch })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.x.cols() != self.config.node_features {
            return Err(ModelError::NodeFeatures {
                expected: self.config.node_features,
                got: batch.x.cols(),
            });
        }
        let needs_edges = matches!(self.config.kind, ModelKind::SkpGat | ModelKind::SkpGnan);
        if needs_edges && !batch.src.is_empty() && batch.e.cols() != self.config.edge_features {
            return Err(ModelError::MissingEdgeFeatures {
                expected: self.config.edge_features,
                got: batch.e.cols(),
            });
        }
        if needs_edges && batch.e.rows() != batch.src.len() {
            return Err(ModelError::MissingEdgeFeatures {
                expected: batch.src.len(),
                got: batch.e.rows(),
            });
        }
        for inp in &batch.inputs {
            if inp.topology.n != inp.n() || inp.topology.dist.n() != inp.n() {
                return Err(ModelError::TopologyMismatch(format!(
                    "sample has {} buses, topology {} has {}",
                    inp.n(),
                    inp.topology.id,
                    inp.topology.n
                )));
            }
        }
        Ok(())
    }

    /// Unscaled model output (`total_nodes x 2`) before the readout.
    pub fn forward_raw(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        match &self.arch {
            Arch::Mlp(net) => net.forward(&self.config, tape, bind, batch),
            Arch::Gat(net) => Ok(*net.forward(tape, bind, batch)?.last().expect("layers")),
            Arch::SkpGat(net) => Ok(*net.forward(tape, bind, batch)?.last().expect("layers")),
            Arch::Gnan(net) => net.forward(tape, bind, batch),
            Arch::SkpGnan(net) => net.forward(tape, bind, batch),
        }
    }

    /// Physical predictions `mu + sigma * raw`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Var, ModelError> {
        let raw = self.forward_raw(tape, bind, batch)?;
        let sigma = tape.constant(Tensor::from_vec(1, 2, self.config.label_std.to_vec()));
        let mu = tape.constant(Tensor::from_vec(1, 2, self.config.label_mean.to_vec()));
        let scaled = tape.scale_cols(raw, sigma)?;
        let out = tape.add_bias(scaled, mu)?;
        if !tape.value(out).all_finite() {
            return Err(ModelError::Numeric {
                model: self.config.kind,
                what: "prediction",
            });
        }
        Ok(out)
    }

    /// Batch loss on a fresh tape; returns the tape, bindings and root.
    pub fn loss_tape(&self, batch: &Batch) -> Result<(Tape, Bindings, Var), ModelError> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let pred = self.forward(&mut tape, &bind, batch)?;
        let y = tape.constant(batch.y.clone());
        let l = loss(&mut tape, pred, y, self.config.kind)?;
        Ok((tape, bind, l))
    }

    /// Loss value and parameter gradients (left in the store).
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64, ModelError> {
        let (mut tape, bind, l) = self.loss_tape(batch)?;
        tape.backward(l)?;
        self.store.collect_grads(&tape, &bind);
        Ok(tape.value(l).item())
    }

    pub fn loss_value(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let pred = self.forward(&mut tape, &bind, batch)?;
        let y = tape.constant(batch.y.clone());
        let l = loss(&mut tape, pred, y, self.config.kind)?;
        Ok(tape.value(l).item())
    }

    /// Physical predictions for a batch, rows in batch order.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bind, batch)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_one(&self, input: &ModelInput) -> Result<Tensor, ModelError> {
        self.predict(&Batch::new(&[input]))
    }

    /// Input features followed by every layer's output (GAT family).
    pub fn layer_embeddings(&self, input: &ModelInput) -> Result<Vec<Tensor>, ModelError> {
        let batch = Batch::new(&[input]);
        self.check_batch(&batch)?;
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let vars = match &self.arch {
            Arch::Gat(net) => net.forward(&mut tape, &bind, &batch)?,
            Arch::SkpGat(net) => net.forward(&mut tape, &bind, &batch)?,
            _ => {
                return Err(ModelError::Unsupported {
                    model: self.config.kind,
                    op: "layer embeddings",
                })
            }
        };
        let mut out = vec![batch.x.clone()];
        out.extend(vars.iter().map(|&v| tape.value(v).clone()));
        Ok(out)
    }

    pub(crate) fn skp_gat(&self) -> Option<&gat::SkpGatNet> {
        match &self.arch {
            Arch::SkpGat(n) => Some(n),
            _ => None,
        }
    }

    pub(crate) fn gat(&self) -> Option<&gat::GatNet> {
        match &self.arch {
            Arch::Gat(n) => Some(n),
            _ => None,
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            params: self.store.snapshot(),
            meta: serde_json::json!({ "model": self.config, "extra": extra }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Estimator, ModelError> {
        let config: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
            .map_err(|e| ModelError::Config(format!("checkpoint has no usable model config: {e}")))?;
        let mut est = Estimator::new(config)?;
        est.store.load_values(&ckpt.params)?;
        Ok(est)
    }
}

/// Mean squared error over buses and channels, angle differences scaled
/// by [`ANGLE_LOSS_WEIGHT`].
pub fn loss(tape: &mut Tape, pred: Var, labels: Var, model: ModelKind) -> Result<Var, ModelError> {
    if !tape.value(pred).all_finite() {
        return Err(ModelError::Numeric {
            model,
            what: "prediction",
        });
    }
    let diff = tape.sub(pred, labels)?;
    let w = tape.constant(Tensor::from_vec(1, 2, vec![1.0, ANGLE_LOSS_WEIGHT]));
    let scaled = tape.scale_cols(diff, w)?;
    let sq = tape.square(scaled);
    let l = tape.mean(sq)?;
    if !tape.value(l).item().is_finite() {
        return Err(ModelError::Numeric { model, what: "loss" });
    }
    Ok(l)
}

/// Evaluates the loss outside any model.
pub fn loss_value(pred: &Tensor, labels: &Tensor) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let y = tape.constant(labels.clone());
    let l = loss(&mut tape, p, y, ModelKind::Mlp)?;
    Ok(tape.value(l).item())
}

pub use gnan::GnanAnalysis;

impl Estimator {
    /// Learned weight per hop distance `0..=max_hop`, one curve per output
    /// channel. SKP-GNAN averages its edge network over `edges` at hop 1.
    pub fn distance_curves(&self, max_hop: usize, edges: &Tensor) -> Result<Vec<Vec<f64>>, ModelError> {
        match &self.arch {
            Arch::Gnan(net) => {
                let c = net.distance_curve(&self.store, max_hop)?;
                Ok(vec![c.clone(), c])
            }
            Arch::SkpGnan(net) => Ok(vec![
                net.distance_curve(&self.store, 0, max_hop, edges)?,
                net.distance_curve(&self.store, 1, max_hop, edges)?,
            ]),
            _ => Err(ModelError::Unsupported {
                model: self.config.kind,
                op: "distance curve",
            }),
        }
    }

    /// Per-feature shape outputs, embeddings, contributions and operators
    /// of a GNAN-family model on one sample.
    pub fn gnan_analysis(&self, input: &ModelInput) -> Result<GnanAnalysis, ModelError> {
        match &self.arch {
            Arch::Gnan(net) => net.analyse(&self.store, input),
            Arch::SkpGnan(net) => net.analyse(&self.store, input),
            _ => Err(ModelError::Unsupported {
                model: self.config.kind,
                op: "additive attribution",
            }),
        }
    }

    /// Row-normalized SKP-GAT attention operators `A_h` (`N x N`, one per
    /// head) and the raw edge scores `z` (edges then self loops).
    pub fn skp_gat_attention(&self, input: &ModelInput) -> Result<Vec<(Tensor, Tensor)>, ModelError> {
        let net = self.skp_gat().ok_or(ModelError::Unsupported {
            model: self.config.kind,
            op: "edge attention",
        })?;
        let batch = Batch::new(&[input]);
        self.check_batch(&batch)?;
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let heads = net.attention(&mut tape, &bind, &batch)?;
        Ok(heads
            .into_iter()
            .map(|(z, alpha)| {
                let n = batch.total_nodes;
                let mut a = Tensor::zeros(n, n);
                let (src, dst) = gat::with_self_loops(&batch);
                for (k, (&s, &d)) in src.iter().zip(&dst).enumerate() {
                    let v = a.get(d, s) + tape.value(alpha).data()[k];
                    a.set(d, s, v);
                }
                (a, tape.value(z).clone())
            })
            .collect())
    }

    /// GATv2 attention coefficients of one layer as an `N x N` matrix.
    pub fn gat_attention(&self, input: &ModelInput, layer: usize) -> Result<Tensor, ModelError> {
        let net = self.gat().ok_or(ModelError::Unsupported {
            model: self.config.kind,
            op: "GATv2 attention",
        })?;
        let batch = Batch::new(&[input]);
        self.check_batch(&batch)?;
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let alphas = net.attention_per_layer(&mut tape, &bind, &batch)?;
        let alpha = *alphas
            .get(layer)
            .ok_or_else(|| ModelError::Config(format!("layer {layer} out of range")))?;
        let n = batch.total_nodes;
        let (src, dst) = gat::with_self_loops(&batch);
        let mut a = Tensor::zeros(n, n);
        for (k, (&s, &d)) in src.iter().zip(&dst).enumerate() {
            let v = a.get(d, s) + tape.value(alpha).data()[k];
            a.set(d, s, v);
        }
        Ok(a)
    }
}
