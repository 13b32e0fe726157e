//! Minimal differentiable layer for the two policies: dense matrices,
//! hand-derived backward passes, Adam and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod layer;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig, StepStats};
pub use layer::{layer_backward, layer_forward, LayerCache};
pub use ops::{aafm, aafm_backward, sigmoid, softmax};
pub use params::{LayerParams, LocalParams, ModelConfig, Params, ReductionParams};
pub use tensor::{Real, Tensor2};
