//! Segmentation network: tensors, layers, the model and its checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use model::{input_from_bscan, ForwardCache, ForwardOutput, NetConfig, Network, ReconstructionOutput};
pub use tensor::{Real, Tensor3};
