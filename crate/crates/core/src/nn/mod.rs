//! Dense double-precision tensors, the layer kernels the encoders need, a
//! recording tape for reverse-mode gradients, and the Adam optimizer.

mod adam;
pub mod ops;
mod tape;
mod tensor;
pub mod weights;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::ConvGeometry;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
