use crate::diff::{Bindings, DiffError, ParamId, ParamStore, Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }

    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Dense {
        Dense {
            w: store.add_weight(format!("{prefix}.w"), fan_in, fan_out, rng),
            b: store.add_zeros(format!("{prefix}.b"), 1, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var, DiffError> {
        let h = tape.matmul(x, bind.var(self.w))?;
        tape.add_bias(h, bind.var(self.b))
    }
}

/// Dense stack with an activation after every layer but the last.
#[derive(Debug, Clone)]
pub struct Stack {
    pub layers: Vec<Dense>,
    pub act: Activation,
}

impl Stack {
    /// `dims = [in, hidden.., out]`; layers are named `{prefix}.l{i}`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], act: Activation, rng: &mut R) -> Stack {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect();
        Stack { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, mut x: Var) -> Result<Var, DiffError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bind, x)?;
            if i < last {
                x = self.act.apply(tape, x);
            }
        }
        Ok(x)
    }
}
