use super::nets::{Activation, Stack};
use super::{Batch, ModelConfig, ModelError};
use crate::diff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Fully connected baseline on the bus-ordered, zero-padded flattening of
/// all node features.
#[derive(Debug, Clone)]
pub struct MlpNet {
    stack: Stack,
}

impl MlpNet {
    pub fn new<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> MlpNet {
        let input = config.max_buses * config.node_features;
        let dims = [input, config.mlp_hidden, config.mlp_hidden, 2 * config.max_buses];
        MlpNet {
            stack: Stack::new(store, "dense", &dims, Activation::LeakyRelu(0.01), rng),
        }
    }

    pub fn forward(&self, config: &ModelConfig, tape: &mut Tape, bind: &Bindings, batch: &Batch) -> Result<Var, ModelError> {
        let max = config.max_buses;
        let f = config.node_features;
        let b = batch.inputs.len();
        let mut flat = Tensor::zeros(b, max * f);
        let mut keep = Vec::with_capacity(batch.total_nodes);
        for (g, inp) in batch.inputs.iter().enumerate() {
            let n = inp.n();
            if n > max {
                return Err(ModelError::Capacity { buses: n, max });
            }
            flat.row_mut(g)[..n * f].copy_from_slice(inp.x.data());
            keep.extend((0..n).map(|i| g * max + i));
        }
        let x = tape.constant(flat);
        let out = self.stack.forward(tape, bind, x)?;
        let per_bus = tape.reshape(out, b * max, 2)?;
        Ok(tape.gather_rows(per_bus, &keep)?)
    }
}
