//! Deep parametric 3D filters for joint video super-resolution, denoising and
//! low-light enhancement.
//!
//! A predictor network maps a short window of low-resolution, low-light, noisy
//! frames to a per-pixel bundle of spatiotemporal kernels plus luminance
//! multipliers; applying that bundle to the window yields an upsampled,
//! denoised and brightened frame, which a residual head then refines.

pub mod error;
pub mod gradcheck;
pub mod tensor;
pub mod bench;
pub mod config;
pub mod dp3df;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod predictor;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
