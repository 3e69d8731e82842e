//! Surgical-smoke synthesis and desmoking toolkit.
//!
//! * [`imaging`]: image containers, PNG I/O, bilinear resize.
//! * [`scattering`]: scattering model, inversion, `K`/`B` reparameterization.
//! * [`synth`]: procedural smoke, compositing, randomized paired datasets.
//! * [`dcp`]: dark-channel-prior baseline.
//! * [`head`], [`model`], [`train`]: physics-inspired head, toy backbone, training.
//! * [`metrics`]: SSIM, PSNR, depth MAE, mask IoU and aggregation.

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod atomic;
pub mod dcp;
pub mod error;
pub mod head;
pub mod imaging;
pub mod metrics;
pub mod model;
mod nn;
pub mod noise;
pub mod par;
pub mod scattering;
pub mod scene;
pub mod synth;
pub mod train;

pub use atomic::write_atomic;
pub use error::{Error, Result};
pub use imaging::{ColorField, Field, Image, ScalarField};
