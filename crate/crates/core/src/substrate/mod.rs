//! Minimal differentiable compute layer.
//!
//! Values live in row-major [`Tensor`]s (images are `N x C x H x W`). A
//! [`Tape`] records every operation of one forward pass so [`Tape::backward`]
//! can replay it in reverse and deposit gradients into a [`ParameterSet`].

pub mod kernels;
mod layer;
mod params;
mod tape;
mod tensor;

pub use kernels::{conv_output_size, ConvGeometry, PoolGeometry};
pub use layer::{LayerSpec, Mode, Padding};
pub use params::{sgd_step, DecayByTag, ParamId, ParamTag, Parameter, ParameterSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
