//! Minimal CPU network engine: channel-major tensors, layers and their
//! gradients.

pub mod layers;
pub mod tensor;

pub use layers::{
    build_layers, BatchNorm, Cache, Conv2d, Layer, LayerSpec, Linear, Mode, Param, ResidualBlock,
    Shortcut,
};
pub use tensor::{gemm, Dims, Tensor};
