//! Dense tensors, reverse-mode differentiation, MLPs and the Adam optimizer.

mod adam;
pub mod checkpoint;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use mlp::{mlp_forward, Activation, BoundMlp, Mlp};
pub use params::{Block, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
