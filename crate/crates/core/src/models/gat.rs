use super::nets::{Activation, Stack};
use super::{Batch, ModelConfig};
use crate::diff::{Bindings, DiffError, ParamId, ParamStore, Shape, Tape, Var};
use rand::Rng;

/// Slope inside attention scoring.
const ATTENTION_SLOPE: f64 = 0.2;
/// Slope of hidden-layer and edge-network activations.
const HIDDEN_SLOPE: f64 = 0.01;

/// Aggregation operator of one SKP channel.
#[derive(Debug, Clone)]
pub enum Operator {
    /// Explicit `N x N` matrix.
    Dense(Var),
    /// `out[dst[e]] += weights[e] * in[src[e]]` over `n` nodes.
    Sparse {
        weights: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
        n: usize,
    },
}

fn apply_operator(tape: &mut Tape, op: &Operator, h: Var) -> Result<Var, DiffError> {
    match op {
        Operator::Dense(a) => tape.matmul(*a, h),
        Operator::Sparse { weights, src, dst, n } => {
            let msg = tape.gather_rows(h, src)?;
            let msg = tape.scale_rows(msg, *weights)?;
            tape.segment_sum(msg, dst, *n)
        }
    }
}

/// `X' = sum_c A_c X W_c`, the kernel shared by both SKP models.
pub fn skp_layer_generic(tape: &mut Tape, x: Var, ops: &[Operator], weights: &[Var]) -> Result<Var, DiffError> {
    if ops.is_empty() || ops.len() != weights.len() {
        return Err(DiffError::Shape {
            op: "skp_layer_generic",
            shapes: weights.iter().map(|&w| tape.shape(w)).chain([Shape::new(ops.len(), 0)]).collect(),
        });
    }
    let mut acc: Option<Var> = None;
    for (op, &w) in ops.iter().zip(weights) {
        let h = tape.matmul(x, w)?;
        let term = apply_operator(tape, op, h)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Batch edges followed by one self loop per node.
pub fn with_self_loops(batch: &Batch) -> (Vec<usize>, Vec<usize>) {
    let mut src = batch.src.clone();
    let mut dst = batch.dst.clone();
    src.extend(0..batch.total_nodes);
    dst.extend(0..batch.total_nodes);
    (src, dst)
}

fn layer_dims(config: &ModelConfig) -> Vec<usize> {
    let mut dims = vec![config.node_features];
    dims.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
    dims.push(2);
    dims
}

#[derive(Debug, Clone)]
struct GatLayer {
    w_src: ParamId,
    w_dst: ParamId,
    att: ParamId,
    bias: ParamId,
}

/// Single-head GATv2 stack:
/// `e_ij = a^T LeakyReLU(W_dst x_i + W_src x_j)`, softmax over the
/// in-neighbourhood (self loop included), message `W_src x_j`.
#[derive(Debug, Clone)]
pub struct GatNet {
    layers: Vec<GatLayer>,
}

impl GatNet {
    pub fn new<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> GatNet {
        let dims = layer_dims(config);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| GatLayer {
                w_src: store.add_weight(format!("layer{l}.w_src"), w[0], w[1], rng),
                w_dst: store.add_weight(format!("layer{l}.w_dst"), w[0], w[1], rng),
                att: store.add_weight(format!("layer{l}.att"), w[1], 1, rng),
                bias: store.add_zeros(format!("layer{l}.bias"), 1, w[1]),
            })
            .collect();
        GatNet { layers }
    }

    fn run(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<(Vec<Var>, Vec<Var>), DiffError> {
        let (src, dst) = with_self_loops(batch);
        let mut x = tape.constant(batch.x.clone());
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut alphas = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let hs = tape.matmul(x, bind.var(layer.w_src))?;
            let hd = tape.matmul(x, bind.var(layer.w_dst))?;
            let js = tape.gather_rows(hs, &src)?;
            let id = tape.gather_rows(hd, &dst)?;
            let pre = tape.add(js, id)?;
            let act = tape.leaky_relu(pre, ATTENTION_SLOPE);
            let score = tape.matmul(act, bind.var(layer.att))?;
            let alpha = tape.segment_softmax(score, &dst)?;
            let msg = tape.scale_rows(js, alpha)?;
            let agg = tape.segment_sum(msg, &dst, batch.total_nodes)?;
            let mut out = tape.add_bias(agg, bind.var(layer.bias))?;
            if l < last {
                out = tape.leaky_relu(out, HIDDEN_SLOPE);
            }
            outs.push(out);
            alphas.push(alpha);
            x = out;
        }
        Ok((outs, alphas))
    }

    /// Output of every layer; the last one is the raw prediction.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Vec<Var>, DiffError> {
        Ok(self.run(tape, bind, batch)?.0)
    }

    pub fn attention_per_layer(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Vec<Var>, DiffError> {
        Ok(self.run(tape, bind, batch)?.1)
    }
}

#[derive(Debug, Clone)]
struct SkpHead {
    edge: Stack,
    self_score: ParamId,
}

#[derive(Debug, Clone)]
struct SkpGatLayer {
    w: Vec<ParamId>,
    bias: ParamId,
}

/// Edge-conditioned attention: each head scores edges from their features
/// alone, and every layer applies `phi(sum_h A_h X W_h + b)`.
#[derive(Debug, Clone)]
pub struct SkpGatNet {
    heads: Vec<SkpHead>,
    layers: Vec<SkpGatLayer>,
}

impl SkpGatNet {
    pub fn new<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> SkpGatNet {
        let heads = (0..config.heads)
            .map(|h| SkpHead {
                edge: Stack::new(
                    store,
                    &format!("head{h}.edge"),
                    &[config.edge_features, config.edge_hidden, 1],
                    Activation::LeakyRelu(HIDDEN_SLOPE),
                    rng,
                ),
                self_score: store.add_zeros(format!("head{h}.self_score"), 1, 1),
            })
            .collect();
        let dims = layer_dims(config);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| SkpGatLayer {
                w: (0..config.heads)
                    .map(|h| store.add_weight(format!("layer{l}.head{h}.w"), w[0], w[1], rng))
                    .collect(),
                bias: store.add_zeros(format!("layer{l}.bias"), 1, w[1]),
            })
            .collect();
        SkpGatNet { heads, layers }
    }

    /// Per head: raw scores `z` (batch edges, then self loops) and the
    /// normalized weights.
    pub fn attention(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Vec<(Var, Var)>, DiffError> {
        let (_, dst) = with_self_loops(batch);
        let e = tape.constant(batch.e.clone());
        let self_rows = vec![0usize; batch.total_nodes];
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let selfz = tape.gather_rows(bind.var(head.self_score), &self_rows)?;
            let z = if batch.src.is_empty() {
                selfz
            } else {
                let ez = head.edge.forward(tape, bind, e)?;
                tape.concat_rows(&[ez, selfz])?
            };
            let alpha = tape.segment_softmax(z, &dst)?;
            out.push((z, alpha));
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Vec<Var>, DiffError> {
        let (src, dst) = with_self_loops(batch);
        let ops: Vec<Operator> = self
            .attention(tape, bind, batch)?
            .into_iter()
            .map(|(_, alpha)| Operator::Sparse {
                weights: alpha,
                src: src.clone(),
                dst: dst.clone(),
                n: batch.total_nodes,
            })
            .collect();
        let mut x = tape.constant(batch.x.clone());
        let mut outs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let ws: Vec<Var> = layer.w.iter().map(|&w| bind.var(w)).collect();
            let agg = skp_layer_generic(tape, x, &ops, &ws)?;
            let mut out = tape.add_bias(agg, bind.var(layer.bias))?;
            if l < last {
                out = tape.leaky_relu(out, HIDDEN_SLOPE);
            }
            outs.push(out);
            x = out;
        }
        Ok(outs)
    }
}
