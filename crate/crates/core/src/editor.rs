//! Deterministic editor oracle: the training supervisor standing in for a
//! text-driven 2D image editor.
//!
//! Presets are global color transforms, pure in (pixel value, pixel
//! coordinate):
//!
//!   0  identity
//!   1  hue rotation of 60 degrees about the gray axis, then contrast 1.2
//!      about mid-gray
//!   2  "bronze" channel mix
//!   3  vertical brightness ramp, gain 0.6 at the top row to 1.4 at the
//!      bottom
//!   4  recolor toward red: collapse to luminance, split red against
//!      green/blue by a fraction of the headroom (idempotent up to rounding)
//!
//! Optional jitter models frame-inconsistent supervision. Each (view, time)
//! frame hashes to a gain/bias pair applied after the preset,
//!
//!   gain = 1 + sigma (2 u1 - 1),  bias = (sigma / 2)(2 u2 - 1),
//!
//! zero-mean by construction, so jittered targets average to the noise-free
//! preset. Every preset is Lipschitz in pixel values with constant <= 2,
//! which keeps training targets bounded.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffers::ImageBuffer;
use crate::error::{Error, Result};
use crate::rng::{mix64, unit_f64};

/// Editor request: which preset, how much per-frame inconsistency, and the
/// seed the inconsistency descends from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub prompt_id: u32,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for EditSpec {
    fn default() -> Self {
        EditSpec {
            prompt_id: 0,
            jitter_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Number of built-in presets; `prompt_id` must be below this.
pub const PRESET_COUNT: u32 = 5;

/// Contrast gain of preset 1, applied about mid-gray after the hue turn.
const CONTRAST_GAIN: f64 = 1.2;

/// Red/cyan separation of preset 4, as a fraction of the luminance
/// headroom min(L, 1 - L).
const RED_PUSH: f64 = 0.6;

/// 60 degree rotation about the gray axis (1,1,1)/sqrt(3). Orthogonal, and
/// every row sums to 1, so grays are fixed points.
fn hue_rotation() -> Matrix3<f64> {
    Matrix3::new(2.0, -1.0, 2.0, 2.0, 2.0, -1.0, -1.0, 2.0, 2.0) / 3.0
}

/// Warm "bronze" mix. Red and green rows sum above 1 and rely on the final
/// clamp; largest singular value is ~1.34.
fn bronze_mix() -> Matrix3<f64> {
    Matrix3::new(0.393, 0.769, 0.189, 0.349, 0.686, 0.168, 0.272, 0.534, 0.131)
}

/// Applies preset `prompt_id` to one pixel before jitter and clamping.
fn preset_pixel(prompt_id: u32, p: Vector3<f64>, y: usize, height: usize) -> Vector3<f64> {
    match prompt_id {
        0 => p,
        1 => (hue_rotation() * p).map(|v| 0.5 + CONTRAST_GAIN * (v - 0.5)),
        2 => bronze_mix() * p,
        3 => {
            // A one-row image has no ramp extent; pin its gain to 1.
            let t = if height > 1 {
                y as f64 / (height - 1) as f64
            } else {
                0.5
            };
            p * (0.6 + 0.8 * t)
        }
        4 => {
            let l = (p.x + p.y + p.z) / 3.0;
            let push = RED_PUSH * l.min(1.0 - l);
            // Luminance is preserved: (l+push) + 2(l - push/2) = 3l, so a
            // second application recomputes the same l and push.
            Vector3::new(l + push, l - push / 2.0, l - push / 2.0)
        }
        _ => unreachable!("prompt_id validated before dispatch"),
    }
}

fn validate(spec: &EditSpec) -> Result<()> {
    if spec.prompt_id >= PRESET_COUNT {
        return Err(Error::UnknownPrompt(spec.prompt_id));
    }
    Ok(())
}

/// Gain/bias pair for one (view, time) frame. A hash chain rather than a
/// stateful RNG: re-editing the same frame at any iteration jitters it the
/// same way, while distinct frames disagree.
pub fn jitter_params(spec: &EditSpec, view: usize, time: usize) -> (f64, f64) {
    let k = mix64(mix64(mix64(spec.seed) ^ view as u64) ^ time as u64);
    let gain = 1.0 + spec.jitter_sigma * (2.0 * unit_f64(k) - 1.0);
    let bias = spec.jitter_sigma / 2.0 * (2.0 * unit_f64(mix64(k)) - 1.0);
    (gain, bias)
}

fn transform(image: &ImageBuffer, prompt_id: u32, jitter: Option<(f64, f64)>) -> ImageBuffer {
    ImageBuffer::from_fn(image.width(), image.height(), |x, y| {
        let mut p = preset_pixel(prompt_id, image.get(x, y), y, image.height());
        if let Some((gain, bias)) = jitter {
            p = p.map(|v| gain * v + bias);
        }
        p.map(|v| v.clamp(0.0, 1.0))
    })
}

/// Edits one rendered frame: preset, then per-(view, time) jitter when
/// `jitter_sigma > 0`, then a clamp to [0, 1].
pub fn edit(image: &ImageBuffer, spec: &EditSpec, view: usize, time: usize) -> Result<ImageBuffer> {
    validate(spec)?;
    let jitter = if spec.jitter_sigma > 0.0 {
        Some(jitter_params(spec, view, time))
    } else {
        None
    };
    Ok(transform(image, spec.prompt_id, jitter))
}

/// The preset with jitter forced off: the evaluation ground truth that
/// jittered edits average toward. Equals `edit` bit-for-bit at sigma = 0.
pub fn noise_free_target(image: &ImageBuffer, spec: &EditSpec) -> Result<ImageBuffer> {
    validate(spec)?;
    Ok(transform(image, spec.prompt_id, None))
}
