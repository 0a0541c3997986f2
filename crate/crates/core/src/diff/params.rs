use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::DiffError;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

const CHECKPOINT_FORMAT: &str = "gridmp-params";
const CHECKPOINT_VERSION: u32 = 1;

/// Stable index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
    first_moment: Tensor,
    inf_norm: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let (r, c) = (value.rows(), value.cols());
        Self {
            value,
            grad: None,
            first_moment: Tensor::zeros(r, c),
            inf_norm: Tensor::zeros(r, c),
        }
    }
}

/// Named trainable tensors with Adamax state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Re-registering a name replaces it.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (idx, _) = self.params.insert_full(name.into(), Param::new(value));
        ParamId(idx)
    }

    /// Weight matrix with symmetric fan initialisation,
    /// uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) {
        self.params[id.0].grad = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(
            self.params
                .values()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        )
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings(
            self.params
                .values()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Copies gradients out of a tape after `backward`. Parameters that
    /// were not reachable from the root get an explicit zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (p, &v) in self.params.values_mut().zip(&bindings.0) {
            p.grad = Some(match tape.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.rows(), p.value.cols()),
            });
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adamax update; consumes the gradients.
    pub fn adamax_step(&mut self, lr: f64) -> Result<(), DiffError> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(DiffError::UnpopulatedGradient(name.clone()));
        }
        self.step += 1;
        let step_size = lr / (1.0 - ADAMAX_BETA1.powi(self.step as i32));
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            let m = p.first_moment.data_mut();
            let u = p.inf_norm.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = ADAMAX_BETA1 * m[i] + (1.0 - ADAMAX_BETA1) * gi;
                u[i] = (ADAMAX_BETA2 * u[i]).max(gi.abs());
                w[i] -= step_size * m[i] / (u[i] + ADAMAX_EPS);
            }
        }
        Ok(())
    }

    /// Values only; optimiser state is reset.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, p) in &self.params {
            out.add(k.clone(), p.value.clone());
        }
        out.step = self.step;
        out
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for (k, p) in self.params.iter_mut() {
            let src = other
                .params
                .get(k)
                .ok_or_else(|| DiffError::UnknownParameter(k.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(DiffError::Shape {
                    op: "load_values",
                    shapes: vec![p.value.shape(), src.value.shape()],
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    step: u64,
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Parameter values plus free-form metadata.
///
/// On disk: one line of JSON header (names, shapes, step counter, metadata)
/// followed by the little-endian `f64` payload of every tensor, in header
/// order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DiffError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.params.step,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let line = serde_json::to_string(&header).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, DiffError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut params = ParamStore::new();
        let mut buf = [0u8; 8];
        for th in &header.tensors {
            let mut data = Vec::with_capacity(th.rows * th.cols);
            for _ in 0..th.rows * th.cols {
                r.read_exact(&mut buf)
                    .map_err(|_| DiffError::Checkpoint(format!("truncated payload in `{}`", th.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            params.add(th.name.clone(), Tensor::from_vec(th.rows, th.cols, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DiffError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        params.step = header.step;
        Ok(Self {
            params,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![0.3, -0.7]));
        store.set_grad(id, Tensor::zeros(1, 2));
        store.adamax_step(1e-3).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -0.7]);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_moves_against_the_gradient_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        store.set_grad(id, Tensor::from_vec(1, 2, vec![0.5, -2.0]));
        store.adamax_step(1e-3).unwrap();
        // bias-corrected m equals g, u equals |g|
        let expect0 = 1.0 - 1e-3 * 0.5 / (0.5 + ADAMAX_EPS);
        let expect1 = 1.0 + 1e-3 * 2.0 / (2.0 + ADAMAX_EPS);
        assert!((store.value(id).data()[0] - expect0).abs() < 1e-15);
        assert!((store.value(id).data()[1] - expect1).abs() < 1e-15);
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(1, 1));
        assert!(matches!(
            store.adamax_step(1e-3),
            Err(DiffError::UnpopulatedGradient(n)) if n == "w"
        ));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut last = 1.0f64;
        for step in 0..100 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let w = b.var(id);
            let f = tape.square(w);
            tape.backward(f).unwrap();
            store.collect_grads(&tape, &b);
            store.adamax_step(1e-2).unwrap();
            let now = store.value(id).item().abs();
            if step > 0 {
                assert!(now < last, "step {step}: {now} >= {last}");
            }
            last = now;
        }
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.add_weight("w", 10, 6, &mut rng);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add_weight("a.w", 3, 4, &mut rng);
        store.add_zeros("a.b", 1, 4);
        store.step = 17;
        let ck = Checkpoint {
            params: store,
            meta: serde_json::json!({"kind": "gat"}),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.params.step(), 17);
        assert_eq!(back.meta["kind"], "gat");
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(truncated).is_err());
    }
}
