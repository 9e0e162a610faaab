//! High-resolution salient object detection via recurrent coarse-to-fine
//! refinement.
//!
//! The model predicts a saliency map in three stages: a coarse stage runs a
//! windowed-attention backbone on a low-resolution view, then two refinement
//! stages re-run the *same* backbone on embeddings fused with high-resolution
//! encoder features and decode back up, guided by the previous stage's
//! prediction and a running edge estimate. A pixel-wise refiner re-predicts
//! the highest-uncertainty boundary pixels from globally attended features.
//!
//! Everything is generic over the scalar type ([`Scalar`]: `f32` or `f64`);
//! training defaults to `f32`, all gradient verification runs at `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod datagen;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pixel_refiner;
pub mod refine;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod windows;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tape::{Gradients, Tape, Var};

/// Dense H×W×C activation or image plane, batched as `[n,h,w,c]`.
pub type Tensor<T> = ndarray::ArrayD<T>;
/// Single-precision tensor (default training dtype).
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor (verification dtype).
pub type Tensor64 = Tensor<f64>;
