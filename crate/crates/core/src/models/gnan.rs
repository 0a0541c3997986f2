use super::nets::{Activation, Stack};
use super::{Batch, ModelConfig, ModelError, ModelInput, TopologyContext, SKP_MAX_HOP};
use crate::diff::{Bindings, DiffError, ParamId, ParamStore, SparseMap, Tape, Tensor, Var};
use rand::Rng;

const EDGE_SLOPE: f64 = 0.01;

/// Output-layer scale of the shape networks at initialization, so the sum
/// over features starts near the label mean.
const SHAPE_OUTPUT_INIT: f64 = 0.1;

fn shape_nets<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Vec<Stack> {
    let h = config.shape_hidden;
    (0..config.node_features)
        .map(|k| {
            let net = Stack::new(store, &format!("f{k}"), &[1, h, h, 2], Activation::Tanh, rng);
            let last = net.layers.last().expect("three layers");
            for v in store.value_mut(last.w).data_mut() {
                *v *= SHAPE_OUTPUT_INIT;
            }
            net
        })
        .collect()
}

/// Per-feature shape outputs (`T x 2` each) and their sum over features.
fn shape_outputs(shapes: &[Stack], tape: &mut Tape, bind: &Bindings, x: &Tensor) -> Result<(Vec<Var>, Var), DiffError> {
    let mut outs = Vec::with_capacity(shapes.len());
    let mut total: Option<Var> = None;
    for (k, net) in shapes.iter().enumerate() {
        let col = tape.constant(Tensor::column(x.column_vec(k)));
        let f = net.forward(tape, bind, col)?;
        total = Some(match total {
            None => f,
            Some(t) => tape.add(t, f)?,
        });
        outs.push(f);
    }
    Ok((outs, total.expect("at least one feature")))
}

fn s_of_hop(h: usize) -> f64 {
    1.0 / (1.0 + h as f64)
}

/// Dense `n x n` operator whose `(i, j)` entry is `coef_ij * w[level_ij]`
/// for every pair `keep` accepts.
fn level_operator(
    tape: &mut Tape,
    w: Var,
    ctx: &TopologyContext,
    keep: impl Fn(usize) -> bool,
) -> Result<Var, DiffError> {
    let n = ctx.n;
    let mut map = SparseMap::with_capacity(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            match ctx.dist.hop(i, j) {
                Some(h) if keep(h) => map.push_output([(h, 1.0 / ctx.dist.shell_count(i, j) as f64)]),
                _ => map.push_output([]),
            }
        }
    }
    tape.sparse_map(w, map, n, n)
}

/// Applies a per-topology operator to each topology run of `g`.
fn per_group(
    tape: &mut Tape,
    batch: &Batch,
    g: Var,
    mut op_for: impl FnMut(&mut Tape, &TopologyContext) -> Result<Var, DiffError>,
) -> Result<Var, DiffError> {
    let mut parts = Vec::with_capacity(batch.groups.len());
    for &(first, count) in &batch.groups {
        let ctx = &batch.inputs[first].topology;
        let m = op_for(tape, ctx)?;
        let start = batch.offsets[first];
        let rows = if batch.groups.len() == 1 {
            g
        } else {
            let idx: Vec<usize> = (start..start + count * ctx.n).collect();
            tape.gather_rows(g, &idx)?
        };
        parts.push(tape.block_matmul(m, rows)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

fn max_hop(batch: &Batch) -> usize {
    batch
        .groups
        .iter()
        .map(|&(first, _)| batch.inputs[first].topology.dist.max_hop())
        .max()
        .unwrap_or(0)
}

/// Values of a standalone sub-network on a plain input.
fn eval_stack(store: &ParamStore, net: &Stack, x: Tensor) -> Result<Tensor, DiffError> {
    let mut tape = Tape::new();
    let bind = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, &bind, xv)?;
    Ok(tape.value(out).clone())
}

/// Intermediate quantities of an additive model on one sample.
#[derive(Debug, Clone)]
pub struct GnanAnalysis {
    /// `f_k(x_jk)` for every feature `k`, `N x 2`.
    pub shape_outputs: Vec<Tensor>,
    /// Per output channel, the normalized aggregation weights
    /// `w_ij = rho_ij / n_ij` (`N x N`).
    pub operators: [Tensor; 2],
    /// Per output channel, the un-normalized distance operator.
    pub raw_operators: [Tensor; 2],
}

impl GnanAnalysis {
    /// `h[k][i, c] = sum_j w^c_ij f_kc(x_jk)`.
    pub fn embeddings(&self) -> Vec<Tensor> {
        self.shape_outputs
            .iter()
            .map(|f| {
                let n = f.rows();
                Tensor::from_fn(n, 2, |i, c| (0..n).map(|j| self.operators[c].get(i, j) * f.get(j, c)).sum())
            })
            .collect()
    }

    /// `C[k][j, c] = f_kc(x_jk) * sum_i w^c_ij`.
    pub fn contributions(&self) -> Vec<Tensor> {
        let n = self.operators[0].rows();
        let col_sums: Vec<Vec<f64>> = (0..2)
            .map(|c| (0..n).map(|j| (0..n).map(|i| self.operators[c].get(i, j)).sum()).collect())
            .collect();
        self.shape_outputs
            .iter()
            .map(|f| Tensor::from_fn(n, 2, |j, c| f.get(j, c) * col_sums[c][j]))
            .collect()
    }

    /// Unscaled prediction `sum_k h[k]`.
    pub fn raw_prediction(&self) -> Tensor {
        let emb = self.embeddings();
        let mut out = Tensor::zeros(emb[0].rows(), 2);
        for h in &emb {
            out.add_assign(h);
        }
        out
    }
}

/// Additive model: `y_ic = sum_k sum_j rho(s_ij) / n_ij * f_kc(x_jk)`,
/// unreachable pairs excluded.
#[derive(Debug, Clone)]
pub struct GnanNet {
    shapes: Vec<Stack>,
    rho: Stack,
}

impl GnanNet {
    pub fn new<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> GnanNet {
        let shapes = shape_nets(config, store, rng);
        let h = config.shape_hidden;
        let rho = Stack::new(store, "rho", &[1, h, h, 1], Activation::Tanh, rng);
        GnanNet { shapes, rho }
    }

    fn rho_levels(&self, tape: &mut Tape, bind: &Bindings, levels: usize) -> Result<Var, DiffError> {
        let s = tape.constant(Tensor::column((0..=levels).map(s_of_hop).collect()));
        self.rho.forward(tape, bind, s)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Var, ModelError> {
        let (_, g) = shape_outputs(&self.shapes, tape, bind, &batch.x)?;
        let r = self.rho_levels(tape, bind, max_hop(batch))?;
        Ok(per_group(tape, batch, g, |tape, ctx| level_operator(tape, r, ctx, |_| true))?)
    }

    /// `rho(1 / (1 + h))` for `h = 0..=max_hop`.
    pub fn distance_curve(&self, store: &ParamStore, max_hop: usize) -> Result<Vec<f64>, DiffError> {
        let s = Tensor::column((0..=max_hop).map(s_of_hop).collect());
        Ok(eval_stack(store, &self.rho, s)?.into_vec())
    }

    pub fn analyse(&self, store: &ParamStore, input: &ModelInput) -> Result<GnanAnalysis, ModelError> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let (fs, _) = shape_outputs(&self.shapes, &mut tape, &bind, &input.x)?;
        let ctx = &input.topology;
        let r = self.rho_levels(&mut tape, &bind, ctx.dist.max_hop())?;
        let rv = tape.value(r).data().to_vec();
        let n = ctx.n;
        let raw = Tensor::from_fn(n, n, |i, j| ctx.dist.hop(i, j).map_or(0.0, |h| rv[h]));
        let op = Tensor::from_fn(n, n, |i, j| {
            ctx.dist
                .hop(i, j)
                .map_or(0.0, |h| rv[h] / ctx.dist.shell_count(i, j) as f64)
        });
        Ok(GnanAnalysis {
            shape_outputs: fs.iter().map(|&f| tape.value(f).clone()).collect(),
            operators: [op.clone(), op],
            raw_operators: [raw.clone(), raw],
        })
    }
}

/// Additive model with a separate edge-conditioned distance operator per
/// output channel:
/// `rho~_ij = rho_c(s_ij) * edge_c(E_ji)` on edges (parallel edges
/// averaged), `rho_c(1) * edge_c(e_self)` on the diagonal and
/// `rho_c(s_ij) * hop_c(l_ij / 50)` for other pairs within 50 hops.
#[derive(Debug, Clone)]
pub struct SkpGnanNet {
    shapes: Vec<Stack>,
    rho: [Stack; 2],
    edge: [Stack; 2],
    hop: [Stack; 2],
    self_edge: ParamId,
}

struct ChannelTerms {
    r: Var,
    q: Var,
    w_edge: Option<Var>,
    w_self: Var,
}

impl SkpGnanNet {
    pub fn new<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> SkpGnanNet {
        let shapes = shape_nets(config, store, rng);
        let h = config.shape_hidden;
        let eh = config.edge_hidden;
        let fe = config.edge_features;
        let mut mk = |name: &str, dims: &[usize], act: Activation, store: &mut ParamStore| {
            [
                Stack::new(store, &format!("{name}0"), dims, act, rng),
                Stack::new(store, &format!("{name}1"), dims, act, rng),
            ]
        };
        let rho = mk("rho", &[1, h, h, 1], Activation::Tanh, store);
        let edge = mk("edge", &[fe, eh, 1], Activation::LeakyRelu(EDGE_SLOPE), store);
        let hop = mk("hop", &[1, eh, 1], Activation::LeakyRelu(EDGE_SLOPE), store);
        // A zero self edge would put every edge-network pre-activation on
        // the leaky kink at initialisation.
        let self_edge = store.add_weight("self_edge", 1, fe, rng);
        SkpGnanNet {
            shapes,
            rho,
            edge,
            hop,
            self_edge,
        }
    }

    fn channel_terms(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        c: usize,
        levels: usize,
        e: Option<Var>,
    ) -> Result<ChannelTerms, DiffError> {
        let s = tape.constant(Tensor::column((0..=levels).map(s_of_hop).collect()));
        let hs = tape.constant(Tensor::column(
            (0..=levels).map(|h| h as f64 / SKP_MAX_HOP as f64).collect(),
        ));
        let r = self.rho[c].forward(tape, bind, s)?;
        let q = self.hop[c].forward(tape, bind, hs)?;
        let w_edge = match e {
            Some(e) => Some(self.edge[c].forward(tape, bind, e)?),
            None => None,
        };
        let w_self = self.edge[c].forward(tape, bind, bind.var(self.self_edge))?;
        Ok(ChannelTerms { r, q, w_edge, w_self })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Var, ModelError> {
        let (_, g) = shape_outputs(&self.shapes, tape, bind, &batch.x)?;
        let levels = max_hop(batch).clamp(1, SKP_MAX_HOP);
        let e = if batch.src.is_empty() {
            None
        } else {
            Some(tape.constant(batch.e.clone()))
        };
        let norm = edge_normalisation(batch);
        let t = batch.total_nodes;
        let mut channels = Vec::with_capacity(2);
        for c in 0..2 {
            let terms = self.channel_terms(tape, bind, c, levels, e)?;
            let sel = tape.constant(Tensor::from_fn(2, 1, |r, _| if r == c { 1.0 } else { 0.0 }));
            let gc = tape.matmul(g, sel)?;

            let r0 = tape.gather_rows(terms.r, &[0])?;
            let s0 = tape.mul(r0, terms.w_self)?;
            let s0 = tape.gather_rows(s0, &vec![0; t])?;
            let mut y = tape.scale_rows(gc, s0)?;

            if let Some(w) = terms.w_edge {
                let r1 = tape.gather_rows(terms.r, &vec![1; batch.src.len()])?;
                let coef = tape.mul(r1, w)?;
                let nv = tape.constant(norm.clone());
                let coef = tape.mul(coef, nv)?;
                let msg = tape.gather_rows(gc, &batch.src)?;
                let msg = tape.scale_rows(msg, coef)?;
                let near = tape.segment_sum(msg, &batch.dst, t)?;
                y = tape.add(y, near)?;
            }

            if levels >= 2 {
                let rq = tape.mul(terms.r, terms.q)?;
                let far = per_group(tape, batch, gc, |tape, ctx| {
                    level_operator(tape, rq, ctx, |h| (2..=SKP_MAX_HOP).contains(&h))
                })?;
                y = tape.add(y, far)?;
            }
            channels.push(y);
        }
        Ok(tape.concat_cols(&channels)?)
    }

    /// Effective weight per hop for channel `c`: self term at hop 0, the
    /// mean edge-network output over `edge_features` rows at hop 1 and the
    /// hop network beyond (zero past the 50-hop cut).
    pub fn distance_curve(
        &self,
        store: &ParamStore,
        c: usize,
        max_hop: usize,
        edge_features: &Tensor,
    ) -> Result<Vec<f64>, DiffError> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let levels = max_hop.max(1);
        let e = if edge_features.rows() == 0 {
            None
        } else {
            Some(tape.constant(edge_features.clone()))
        };
        let terms = self.channel_terms(&mut tape, &bind, c, levels, e)?;
        let r = tape.value(terms.r).data().to_vec();
        let q = tape.value(terms.q).data().to_vec();
        let ws = tape.value(terms.w_self).item();
        let we = terms.w_edge.map_or(1.0, |w| {
            let v = tape.value(w);
            v.sum() / v.len() as f64
        });
        Ok((0..=max_hop)
            .map(|h| match h {
                0 => r[0] * ws,
                1 => r[1] * we,
                h if h <= SKP_MAX_HOP => r[h] * q[h],
                _ => 0.0,
            })
            .collect())
    }

    pub fn analyse(&self, store: &ParamStore, input: &ModelInput) -> Result<GnanAnalysis, ModelError> {
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let (fs, _) = shape_outputs(&self.shapes, &mut tape, &bind, &input.x)?;
        let ctx = &input.topology;
        let n = ctx.n;
        let levels = ctx.dist.max_hop().clamp(1, SKP_MAX_HOP);
        let e = if ctx.edges.is_empty() {
            None
        } else {
            Some(tape.constant(input.e.clone()))
        };
        let mut raw = [Tensor::zeros(n, n), Tensor::zeros(n, n)];
        let mut ops = [Tensor::zeros(n, n), Tensor::zeros(n, n)];
        for c in 0..2 {
            let terms = self.channel_terms(&mut tape, &bind, c, levels, e)?;
            let r = tape.value(terms.r).data().to_vec();
            let q = tape.value(terms.q).data().to_vec();
            let ws = tape.value(terms.w_self).item();
            let we: Vec<f64> = terms.w_edge.map_or(Vec::new(), |w| tape.value(w).data().to_vec());
            let mut edge_sum = Tensor::zeros(n, n);
            let mut edge_cnt = Tensor::zeros(n, n);
            for (k, &(s, d)) in ctx.edges.iter().enumerate() {
                edge_sum.set(d, s, edge_sum.get(d, s) + we[k]);
                edge_cnt.set(d, s, edge_cnt.get(d, s) + 1.0);
            }
            for i in 0..n {
                for j in 0..n {
                    let v = match ctx.dist.hop(i, j) {
                        Some(0) => r[0] * ws,
                        Some(1) => r[1] * edge_sum.get(i, j) / edge_cnt.get(i, j),
                        Some(h) if h <= SKP_MAX_HOP => r[h] * q[h],
                        _ => 0.0,
                    };
                    raw[c].set(i, j, v);
                    if v != 0.0 {
                        ops[c].set(i, j, v / ctx.dist.shell_count(i, j) as f64);
                    }
                }
            }
        }
        Ok(GnanAnalysis {
            shape_outputs: fs.iter().map(|&f| tape.value(f).clone()).collect(),
            operators: ops,
            raw_operators: raw,
        })
    }
}

/// `1 / (n_ij * parallel_ij)` for every batch edge `j -> i`.
fn edge_normalisation(batch: &Batch) -> Tensor {
    let mut out = Vec::with_capacity(batch.src.len());
    for (g, inp) in batch.inputs.iter().enumerate() {
        let ctx = &inp.topology;
        let mut mult = std::collections::HashMap::new();
        for &(s, d) in &ctx.edges {
            *mult.entry((s, d)).or_insert(0usize) += 1;
        }
        let _ = g;
        for &(s, d) in &ctx.edges {
            out.push(1.0 / (ctx.dist.shell_count(d, s) * mult[&(s, d)]) as f64);
        }
    }
    Tensor::column(out)
}
