//! Dense-matrix computation graphs with reverse-mode gradients, named
//! parameter storage, the Adamax optimiser and the checkpoint format.

mod params;
mod tape;
mod tensor;

pub use params::{Bindings, Checkpoint, ParamId, ParamStore, ADAMAX_BETA1, ADAMAX_BETA2, ADAMAX_EPS};
pub use tape::{SparseMap, Tape, Var};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {}", fmt_shapes(.shapes))]
    Shape { op: &'static str, shapes: Vec<Shape> },
    #[error("backward requires a scalar root, got {shape}")]
    Rank { shape: Shape },
    #[error("parameter `{0}` has no populated gradient")]
    UnpopulatedGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_shapes(shapes: &[Shape]) -> String {
    shapes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(" vs ")
}
