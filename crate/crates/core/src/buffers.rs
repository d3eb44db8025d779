//! Dense image and parameter-gradient storage.
//!
//! `ImageBuffer` is row-major interleaved RGB in f64. Values are nominally
//! in [0, 1] for rendered or edited images, but the same type carries loss
//! gradients, which may be any finite value; quantization to bytes happens
//! only at file output.

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Vector3<f64>) -> Self {
        let mut img = ImageBuffer::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn uniform(width: usize, height: usize, value: Vector3<f64>) -> Self {
        ImageBuffer::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 3;
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: Vector3<f64>) {
        let i = (y * self.width + x) * 3;
        self.data[i] = value.x;
        self.data[i + 1] = value.y;
        self.data[i + 2] = value.z;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, value: Vector3<f64>) {
        let i = (y * self.width + x) * 3;
        self.data[i] += value.x;
        self.data[i + 1] += value.y;
        self.data[i + 2] += value.z;
    }

    /// Channel `c` of pixel (x, y); channels are 0 = R, 1 = G, 2 = B.
    #[inline]
    pub fn channel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn require_same_shape(&self, other: &ImageBuffer, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                want_w: self.width,
                want_h: self.height,
                got_w: other.width,
                got_h: other.height,
            })
        }
    }

    /// Index of the first non-finite value, as (x, y, channel).
    pub fn find_non_finite(&self) -> Option<(usize, usize, usize)> {
        self.data.iter().position(|v| !v.is_finite()).map(|i| {
            let px = i / 3;
            (px % self.width, px / self.width, i % 3)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.data.len().max(1);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

/// Per-parameter gradients for a list of Gaussians. Rows line up with the
/// Gaussian list that produced them; splats culled at projection time leave
/// their rows exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl GradBuffer {
    pub fn zeros(count: usize) -> Self {
        GradBuffer {
            position: vec![Vector3::zeros(); count],
            rotation: vec![Vector4::zeros(); count],
            log_scale: vec![Vector3::zeros(); count],
            opacity_logit: vec![0.0; count],
            color: vec![Vector3::zeros(); count],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.position[i] += other.position[i] * scale;
            self.rotation[i] += other.rotation[i] * scale;
            self.log_scale[i] += other.log_scale[i] * scale;
            self.opacity_logit[i] += other.opacity_logit[i] * scale;
            self.color[i] += other.color[i] * scale;
        }
    }

    pub fn row_is_zero(&self, i: usize) -> bool {
        self.position[i] == Vector3::zeros()
            && self.rotation[i] == Vector4::zeros()
            && self.log_scale[i] == Vector3::zeros()
            && self.opacity_logit[i] == 0.0
            && self.color[i] == Vector3::zeros()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_lookup_names_the_pixel() {
        let mut img = ImageBuffer::zeros(4, 3);
        assert_eq!(img.find_non_finite(), None);
        let v = Vector3::new(0.0, f64::NAN, 0.0);
        img.set(2, 1, v);
        assert_eq!(img.find_non_finite(), Some((2, 1, 1)));
    }

    #[test]
    fn grad_buffer_accumulates_scaled() {
        let mut a = GradBuffer::zeros(2);
        let mut b = GradBuffer::zeros(2);
        b.opacity_logit[1] = 3.0;
        b.color[0] = Vector3::new(1.0, 0.0, -1.0);
        a.add_scaled(&b, 0.5);
        assert_eq!(a.opacity_logit[1], 1.5);
        assert_eq!(a.color[0], Vector3::new(0.5, 0.0, -0.5));
        assert!(a.row_is_zero(0) == false && b.row_is_zero(0) == false);
        assert!(GradBuffer::zeros(2).row_is_zero(0));
    }
}
