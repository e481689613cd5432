//! Conditional diffusion reconstruction of missing regions in multi-band
//! raster imagery, guided by a digital elevation model and token prompts,
//! with LoRA adapters and an inference-time distribution/style correction
//! pass. Everything runs at desk scale on a single CPU.

pub mod baselines;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod perceptual;
pub mod raster;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the production pipeline. The math core is generic;
/// tests run gradient checks in f64 where finite differences need the
/// extra precision.
pub type Real = f32;

pub type Raster = raster::Raster<Real>;
pub type TileSet = raster::TileSet<Real>;
pub type Tensor = tensor::Tensor<Real>;
pub type NoiseSchedule = diffusion::NoiseSchedule<Real>;
pub type DenoiserParams = denoiser::DenoiserParams<Real>;
pub type FeatureExtractor = perceptual::FeatureExtractor<Real>;
