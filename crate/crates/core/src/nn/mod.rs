//! Minimal neural-network toolkit: tensors, a recording tape with
//! hand-written backward passes, the conditional UNet, and Adam.

mod adam;
mod params;
mod tape;
mod tensor;
mod unet;

pub use adam::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use unet::{timestep_features, UNet, UNetConfig, IN_CHANNELS, OUT_CHANNELS};
