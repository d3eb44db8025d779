//! Differentiable Gaussian-splat engine for editing animatable avatars.
//!
//! The pipeline, front to back:
//!
//! * [`avatar`] deforms a triangle mesh with blendshapes and a rigid pose,
//!   then carries splats from triangle-local frames into world space.
//! * [`rasterizer`] projects world splats to the image plane and composites
//!   them front to back, either standard or occlusion-weighted.
//! * [`autodiff`] replays cached contributions to push pixel gradients back
//!   onto every splat parameter analytically.
//! * [`losses`], [`adversarial`], and [`editor`] supply the training signal:
//!   reconstruction against edited renders, a binding regularizer, and a
//!   temporal-pair discriminator; the editor is a deterministic stand-in
//!   for an image-editing model.
//! * [`trainer`] ties it together with Adam and a seeded sampling loop.
//!
//! Everything is double precision and deterministic: a run is a pure
//! function of its config, for any rayon worker count.

pub mod adversarial;
pub mod autodiff;
pub mod avatar;
pub mod buffers;
pub mod camera;
pub mod editor;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod rasterizer;
pub mod rng;
pub mod trainer;

pub use buffers::{GradBuffer, ImageBuffer};
pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::Gaussian3D;
