//! Simulated photoplethysmography, a from-scratch 1D CNN engine, denoising
//! autoencoder pretraining and a multi-task network that scores signal
//! quality and detects atrial fibrillation in 25 s windows.
//!
//! The numeric core ([`neuro`], [`cdae`], [`deepbeat`], [`interpret`]) is
//! generic over the [`Scalar`] type. Training runs in `f32`; gradient checks
//! run in `f64`. The aliases below pin the common instantiations.

pub mod baseline;
pub mod cdae;
pub mod deepbeat;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod harness;
pub mod interpret;
pub mod neuro;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = neuro::Tensor<f32>;
pub type Tensor64 = neuro::Tensor<f64>;
pub type Sequential32 = neuro::Sequential<f32>;
pub type Sequential64 = neuro::Sequential<f64>;
pub type Cdae32 = cdae::CdaeModel<f32>;
pub type Cdae64 = cdae::CdaeModel<f64>;
pub type DeepBeat32 = deepbeat::DeepBeatModel<f32>;
pub type DeepBeat64 = deepbeat::DeepBeatModel<f64>;
