//! Dense numeric kernel with reverse-mode gradients for the layers the
//! language model needs: embedding lookup, linear, layer-norm, GELU, ReLU,
//! causal attention, softmax and cross-entropy.

mod adam;
pub(crate) mod ops;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{cross_entropy_mean, matmul, softmax};
pub use params::ParamTree;
pub use tape::{GradTape, Gradients, NodeId};
pub use tensor::Tensor;

mod tensor;
