//! Dense `f64` tensors, reverse-mode differentiation and the weight container.

mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use tensor::{
    conv2d, conv2d_padded, layer_norm, matmul, pointwise, softmax_lastdim, ConvGeometry, Pointwise,
    Tensor, LAYER_NORM_EPS,
};
