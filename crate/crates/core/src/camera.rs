//! Pinhole camera with a rigid world-to-view transform.
//!
//! View space is right-handed with +z pointing into the scene; a point is
//! visible only if its view-space depth is positive. Pixel coordinates are
//! continuous, with pixel (ix, iy) covering [ix, ix+1) x [iy, iy+1) and
//! sampled at its center (ix + 0.5, iy + 0.5).

use serde::{Deserialize, Serialize};
use nalgebra::{Matrix3, Vector2, Vector3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-view rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-view translation: view = rotation * world + translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Axis-aligned camera at `position` looking along world +z.
    pub fn facing_z(fx: f64, cx: f64, cy: f64, position: Vector3<f64>, width: usize, height: usize) -> Self {
        Camera {
            fx,
            fy: fx,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: -position,
            width,
            height,
        }
    }

    pub fn view_transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Perspective projection of a view-space point to pixel coordinates.
    pub fn project_view_point(&self, view: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * view.x / view.z + self.cx,
            self.fy * view.y / view.z + self.cy,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::facing_z(100.0, 32.0, 32.0, Vector3::zeros(), 64, 64);
        let v = cam.view_transform(&Vector3::new(0.0, 0.0, 5.0));
        assert_relative_eq!(v.z, 5.0);
        let px = cam.project_view_point(&v);
        assert_relative_eq!(px, Vector2::new(32.0, 32.0));
    }

    #[test]
    fn projection_scales_with_inverse_depth() {
        let cam = Camera::facing_z(100.0, 32.0, 32.0, Vector3::zeros(), 64, 64);
        let px = cam.project_view_point(&Vector3::new(0.5, -0.25, 5.0));
        assert_relative_eq!(px.x, 32.0 + 100.0 * 0.5 / 5.0);
        assert_relative_eq!(px.y, 32.0 - 100.0 * 0.25 / 5.0);
    }
}
