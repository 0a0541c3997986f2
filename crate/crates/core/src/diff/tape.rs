//! Reverse-mode differentiation over a linear tape of dense matrix operations.
//!
//! Every operation appends one node holding its forward value and the
//! handles of its parents. [`Tape::backward`] walks the tape in reverse,
//! which is a valid reverse topological order because parents are always
//! recorded before their children.

use super::tensor::{Shape, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse linear map from a flat input buffer to a flat output
/// buffer: `out[o] = sum_{(i, w) in row o} w * in[i]`.
#[derive(Debug, Clone, Default)]
pub struct SparseMap {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn with_capacity(outputs: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(outputs + 1);
        offsets.push(0);
        Self {
            offsets,
            sources: Vec::with_capacity(entries),
            weights: Vec::with_capacity(entries),
        }
    }

    /// Appends one output element built from `terms`.
    pub fn push_output(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        for (src, w) in terms {
            self.sources.push(src);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    pub fn outputs(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    fn max_source(&self) -> Option<usize> {
        self.sources.iter().copied().max()
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for e in self.offsets[o]..self.offsets[o + 1] {
                acc += self.weights[e] * input[self.sources[e]];
            }
            *slot = acc;
        }
    }

    fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for e in self.offsets[o]..self.offsets[o + 1] {
                grad_in[self.sources[e]] += self.weights[e] * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    GatherRows(Var, Vec<usize>),
    Sparse(Var, SparseMap),
    BlockMatmul(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentSum(..) => "segment_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::GatherRows(..) => "gather_rows",
            Op::Sparse(..) => "sparse_map",
            Op::BlockMatmul(..) => "block_matmul",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type OpResult = Result<Var, DiffError>;

fn shape_err(op: &'static str, shapes: &[Shape]) -> DiffError {
    DiffError::Shape {
        op,
        shapes: shapes.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, &[sa, sb]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(sa.rows, sa.cols, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + 1 * bias` for a `1 x c` bias row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> OpResult {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.rows != 1 || sb.cols != sx.cols {
            return Err(shape_err("add_bias", &[sx, sb]));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..sx.rows {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Multiplies row `r` of `x` by `w[r]` for an `r x 1` column `w`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> OpResult {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.cols != 1 || sw.rows != sx.rows {
            return Err(shape_err("scale_rows", &[sx, sw]));
        }
        let mut value = self.value(x).clone();
        let wv = self.value(w).data().to_vec();
        for (r, s) in wv.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleRows(x, w), rg))
    }

    /// Multiplies column `c` of `x` by `w[c]` for a `1 x c` row `w`.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> OpResult {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.rows != 1 || sw.cols != sx.cols {
            return Err(shape_err("scale_cols", &[sx, sw]));
        }
        let mut value = self.value(x).clone();
        let wv = self.value(w).data().to_vec();
        for r in 0..sx.rows {
            for (v, s) in value.row_mut(r).iter_mut().zip(&wv) {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleCols(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> OpResult {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", &[]));
        };
        let rows = self.shape(first).rows;
        if parts.iter().any(|&p| self.shape(p).rows != rows) {
            let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat_cols", &shapes));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let out = value.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> OpResult {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", &[]));
        };
        let cols = self.shape(first).cols;
        if parts.iter().any(|&p| self.shape(p).cols != cols) {
            let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat_rows", &shapes));
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::vstack(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reinterprets the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> OpResult {
        let sx = self.shape(x);
        if sx.len() != rows * cols {
            return Err(shape_err("reshape", &[sx, Shape::new(rows, cols)]));
        }
        let value = Tensor::from_vec(rows, cols, self.value(x).data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Softmax of an `E x 1` score column, normalised independently within
    /// each segment. `segments[e]` names the segment of row `e`.
    pub fn segment_softmax(&mut self, scores: Var, segments: &[usize]) -> OpResult {
        let s = self.shape(scores);
        if s.cols != 1 || s.rows != segments.len() {
            return Err(shape_err(
                "segment_softmax",
                &[s, Shape::new(segments.len(), 1)],
            ));
        }
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let x = self.value(scores).data();
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&v, &g) in x.iter().zip(segments) {
            if v > max[g] {
                max[g] = v;
            }
        }
        let mut out: Vec<f64> = x
            .iter()
            .zip(segments)
            .map(|(&v, &g)| (v - max[g]).exp())
            .collect();
        let mut denom = vec![0.0; n_seg];
        for (&v, &g) in out.iter().zip(segments) {
            denom[g] += v;
        }
        for (v, &g) in out.iter_mut().zip(segments) {
            *v /= denom[g];
        }
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::column(out),
            Op::SegmentSoftmax(scores, segments.to_vec()),
            rg,
        ))
    }

    /// Sums rows of `x` into `n_segments` output rows.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n_segments: usize) -> OpResult {
        let s = self.shape(x);
        if s.rows != segments.len() || segments.iter().any(|&g| g >= n_segments) {
            return Err(shape_err(
                "segment_sum",
                &[s, Shape::new(segments.len(), n_segments)],
            ));
        }
        let mut value = Tensor::zeros(n_segments, s.cols);
        let src = self.value(x);
        let mut rows = Vec::with_capacity(s.rows);
        for r in 0..s.rows {
            rows.push(src.row(r).to_vec());
        }
        for (row, &g) in rows.iter().zip(segments) {
            for (o, v) in value.row_mut(g).iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SegmentSum(x, segments.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> OpResult {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("mean", &[s]));
        }
        let value = Tensor::scalar(self.value(x).sum() / s.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> OpResult {
        let s = self.shape(x);
        if index.iter().any(|&r| r >= s.rows) {
            return Err(shape_err("gather_rows", &[s, Shape::new(index.len(), s.cols)]));
        }
        let value = self.value(x).select_rows(index);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, index.to_vec()), rg))
    }

    /// Applies a fixed sparse linear map to the flattened values of `x`,
    /// producing a `rows x cols` result.
    pub fn sparse_map(&mut self, x: Var, map: SparseMap, rows: usize, cols: usize) -> OpResult {
        let s = self.shape(x);
        if map.outputs() != rows * cols || map.max_source().is_some_and(|m| m >= s.len()) {
            return Err(shape_err("sparse_map", &[s, Shape::new(rows, cols)]));
        }
        let mut out = vec![0.0; rows * cols];
        map.apply(self.value(x).data(), &mut out);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(rows, cols, out), Op::Sparse(x, map), rg))
    }

    /// Left-multiplies every consecutive `k`-row block of `x` by the
    /// `r x k` matrix `m`, i.e. `(I_B (x) m) x` for `B` blocks.
    pub fn block_matmul(&mut self, m: Var, x: Var) -> OpResult {
        let (sm, sx) = (self.shape(m), self.shape(x));
        if sm.cols == 0 || sx.rows % sm.cols != 0 {
            return Err(shape_err("block_matmul", &[sm, sx]));
        }
        let blocks = sx.rows / sm.cols;
        let (mv, xv) = (self.value(m), self.value(x));
        let mut out = Vec::with_capacity(blocks * sm.rows * sx.cols);
        for b in 0..blocks {
            let xb = Tensor::from_vec(
                sm.cols,
                sx.cols,
                xv.data()[b * sm.cols * sx.cols..(b + 1) * sm.cols * sx.cols].to_vec(),
            );
            out.extend(mv.matmul(&xb).into_vec());
        }
        let rg = self.rg(m) || self.rg(x);
        Ok(self.push(
            Tensor::from_vec(blocks * sm.rows, sx.cols, out),
            Op::BlockMatmul(m, x),
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// trainable node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let rs = self.shape(root);
        if rs != Shape::new(1, 1) {
            return Err(DiffError::Rank { shape: rs });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = hadamard(g, self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = hadamard(g, self.value(*a));
                    self.accumulate(*b, gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g.clone());
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::ScaleRows(x, w) => {
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let s = wv.data()[r];
                        for v in gx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    self.accumulate(*x, gx);
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let gw: Vec<f64> = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(*w, Tensor::column(gw));
                }
            }
            Op::ScaleCols(x, w) => {
                if self.rg(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        for (v, s) in gx.row_mut(r).iter_mut().zip(&wv) {
                            *v *= s;
                        }
                    }
                    self.accumulate(*x, gx);
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let mut gw = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, a), b) in gw.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += a * b;
                        }
                    }
                    self.accumulate(*w, gw);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, g.map(|v| v * s));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).cols;
                    if self.rg(p) {
                        let gp = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.accumulate(p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    if self.rg(p) {
                        let c = sp.cols;
                        let gp = Tensor::from_vec(
                            sp.rows,
                            c,
                            g.data()[off * c..(off + sp.rows) * c].to_vec(),
                        );
                        self.accumulate(p, gp);
                    }
                    off += sp.rows;
                }
            }
            Op::Reshape(x) => {
                let sx = self.shape(*x);
                self.accumulate(*x, Tensor::from_vec(sx.rows, sx.cols, g.data().to_vec()));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                let gx = Tensor::from_vec(g.rows(), g.cols(), data);
                self.accumulate(*x, gx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &t)| gv * (1.0 - t * t))
                    .collect();
                let gx = Tensor::from_vec(g.rows(), g.cols(), data);
                self.accumulate(*x, gx);
            }
            Op::SegmentSoftmax(x, segments) => {
                let y = self.nodes[idx].value.data();
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&yv, &gv), &s) in y.iter().zip(g.data()).zip(segments) {
                    dot[s] += yv * gv;
                }
                let data: Vec<f64> = y
                    .iter()
                    .zip(g.data())
                    .zip(segments)
                    .map(|((&yv, &gv), &s)| yv * (gv - dot[s]))
                    .collect();
                self.accumulate(*x, Tensor::column(data));
            }
            Op::SegmentSum(x, segments) => {
                let gx = g.select_rows(segments);
                self.accumulate(*x, gx);
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(*x, Tensor::filled(s.rows, s.cols, g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let v = g.item() / s.len() as f64;
                self.accumulate(*x, Tensor::filled(s.rows, s.cols, v));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| 2.0 * v * gv)
                    .collect();
                let gx = Tensor::from_vec(g.rows(), g.cols(), data);
                self.accumulate(*x, gx);
            }
            Op::BlockMatmul(m, x) => {
                let (sm, sx) = (self.shape(*m), self.shape(*x));
                let blocks = sx.rows / sm.cols;
                let d = sx.cols;
                let mut gm = Tensor::zeros(sm.rows, sm.cols);
                let mut gx = Vec::with_capacity(sx.len());
                for b in 0..blocks {
                    let gb = Tensor::from_vec(sm.rows, d, g.data()[b * sm.rows * d..(b + 1) * sm.rows * d].to_vec());
                    if self.rg(*m) {
                        let xb = Tensor::from_vec(
                            sm.cols,
                            d,
                            self.value(*x).data()[b * sm.cols * d..(b + 1) * sm.cols * d].to_vec(),
                        );
                        gm.add_assign(&gb.matmul_t(&xb));
                    }
                    if self.rg(*x) {
                        gx.extend(self.value(*m).t_matmul(&gb).into_vec());
                    }
                }
                if self.rg(*m) {
                    self.accumulate(*m, gm);
                }
                if self.rg(*x) {
                    self.accumulate(*x, Tensor::from_vec(sx.rows, d, gx));
                }
            }
            Op::GatherRows(x, index) => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s.rows, s.cols);
                for (k, &r) in index.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Sparse(x, map) => {
                let s = self.shape(*x);
                let mut gx = vec![0.0; s.len()];
                map.apply_transpose(g.data(), &mut gx);
                self.accumulate(*x, Tensor::from_vec(s.rows, s.cols, gx));
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::column(vec![0.0, 0.0]));
        let y = t.segment_softmax(s, &[0, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_segments_are_independent() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::column(vec![1.0, 2.0, -3.0, 0.5, 0.25]));
        let y = t.segment_softmax(s, &[0, 1, 0, 1, 2]).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
        assert_eq!(v[4], 1.0);
    }

    #[test]
    fn leaky_relu_value_and_slope() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-1.0));
        let y = t.leaky_relu(x, 0.2);
        assert!((t.value(y).item() + 0.2).abs() < 1e-15);
        t.backward(y).unwrap();
        assert!((t.grad(x).unwrap().item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn linear_sum_gives_outer_product_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = t.constant(Tensor::column(vec![0.5, -1.0, 2.0]));
        let y = t.matmul(w, x).unwrap();
        let root = t.sum(y);
        t.backward(root).unwrap();
        // d/dW sum(W x) = 1 x^T
        let g = t.grad(w).unwrap();
        assert_eq!(g.row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(g.row(1), &[0.5, -1.0, 2.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn constant_root_populates_nothing() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(3.0));
        t.backward(c).unwrap();
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rank_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(DiffError::Rank { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2x3]"));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let w = t.leaf(Tensor::from_fn(3, 3, |r, c| ((r * 3 + c) as f64).sin()));
            let x = t.constant(Tensor::from_fn(4, 3, |r, c| ((r + 2 * c) as f64).cos()));
            let h = t.matmul(x, w).unwrap();
            let h = t.tanh(h);
            let s = t.square(h);
            let root = t.mean(s).unwrap();
            t.backward(root).unwrap();
            t.grad(w).unwrap().clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
