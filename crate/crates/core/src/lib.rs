//! Sketch-and-stroke conditioned diffusion: noise schedule, conditional UNet,
//! two-directional guidance, realism control, samplers, training, synthetic
//! data and consistency metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the precision for the common cases.

pub mod checkpoint;
pub mod dataprep;
pub mod denoiser;
pub mod error;
pub mod fsio;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod realism;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod training;

pub use checkpoint::Checkpoint;
pub use denoiser::{AnalyticGaussianDenoiser, NoisePredictor};
pub use error::{DissError, Result};
pub use fsio::write_atomic;
pub use guidance::GuidanceScales;
pub use image::{Image, Shape};
pub use nn::{UNet, UNetConfig};
pub use realism::RealismConfig;
pub use sampler::{EditRequest, SampleRequest};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use training::TrainConfig;

pub type ImageF32 = Image<f32>;
pub type ImageF64 = Image<f64>;
pub type UNetF32 = UNet<f32>;
pub type UNetF64 = UNet<f64>;
pub type SampleRequestF32 = SampleRequest<f32>;
pub type EditRequestF32 = EditRequest<f32>;
pub type TrainingExampleF32 = dataprep::TrainingExample<f32>;
