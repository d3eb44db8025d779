//! Mesh-bound avatar rig: blendshape animation, per-triangle frames, and
//! the local-to-world binding for splats.
//!
//! Splats never move on their own. Each one lives in the frame of a parent
//! triangle and is carried along as the mesh deforms:
//!
//!   vertices(t) = R_pose * (base + sum_b psi_b * delta_b) + t_pose
//!
//! A triangle's frame has its origin at the centroid, columns (normalized
//! first edge, normal x edge, normal), and an isotropic scale k = sqrt(area)
//! so splats grow and shrink with the triangle they ride.

use serde::{Deserialize, Serialize};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::{activate_opacity, quat_to_rotation, Gaussian3D};

/// Per-vertex displacement field, one entry per rig vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blendshape {
    pub deltas: Vec<Vector3<f64>>,
}

/// Rigid pose applied after blendshape deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Quaternion [w, x, y, z].
    pub rotation: nalgebra::Vector4<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: crate::gaussian::quat_identity(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarRig {
    pub base_vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub blendshapes: Vec<Blendshape>,
}

impl AvatarRig {
    /// Structural validation: index ranges, blendshape sizes, and
    /// non-degenerate triangles at the base pose.
    pub fn validate(&self) -> Result<()> {
        let n = self.base_vertices.len();
        for tri in &self.triangles {
            for &i in tri {
                if i >= n {
                    return Err(Error::VertexIndexOutOfRange { index: i, count: n });
                }
            }
        }
        for shape in &self.blendshapes {
            if shape.deltas.len() != n {
                return Err(Error::WeightCountMismatch {
                    expected: n,
                    got: shape.deltas.len(),
                });
            }
        }
        triangle_frames(&self.base_vertices, &self.triangles)?;
        Ok(())
    }
}

/// Deformed vertices for one timeline entry.
///
/// `weights` must provide exactly one coefficient per blendshape.
pub fn animate(rig: &AvatarRig, weights: &[f64], pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    if weights.len() != rig.blendshapes.len() {
        return Err(Error::WeightCountMismatch {
            expected: rig.blendshapes.len(),
            got: weights.len(),
        });
    }
    let r = quat_to_rotation(&pose.rotation);
    let mut out = Vec::with_capacity(rig.base_vertices.len());
    for (vi, base) in rig.base_vertices.iter().enumerate() {
        let mut p = *base;
        for (shape, &w) in rig.blendshapes.iter().zip(weights) {
            p += shape.deltas[vi] * w;
        }
        out.push(r * p + pose.translation);
    }
    Ok(out)
}

/// Orthonormal frame plus scale for one triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleFrame {
    /// Centroid of the triangle.
    pub origin: Vector3<f64>,
    /// Columns: normalized first edge, normal x edge, normal. Right-handed.
    pub rotation: Matrix3<f64>,
    /// sqrt(area); multiplies bound positions and scales.
    pub scale: f64,
}

/// Frame of the triangle (v0, v1, v2). Degenerate triangles (area below
/// 1e-12) are rejected because their frame is undefined.
pub fn triangle_frame(v0: &Vector3<f64>, v1: &Vector3<f64>, v2: &Vector3<f64>, index: usize) -> Result<TriangleFrame> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let cross = e1.cross(&e2);
    let area = 0.5 * cross.norm();
    if area < 1e-12 {
        return Err(Error::DegenerateTriangle { index, area });
    }
    let tangent = e1.normalize();
    let normal = cross.normalize();
    let bitangent = normal.cross(&tangent);
    Ok(TriangleFrame {
        origin: (v0 + v1 + v2) / 3.0,
        rotation: Matrix3::from_columns(&[tangent, bitangent, normal]),
        scale: area.sqrt(),
    })
}

/// Frames for every triangle of a deformed mesh.
pub fn triangle_frames(vertices: &[Vector3<f64>], triangles: &[[usize; 3]]) -> Result<Vec<TriangleFrame>> {
    triangles
        .iter()
        .enumerate()
        .map(|(i, t)| triangle_frame(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]], i))
        .collect()
}

/// A splat carried into world space, with activations applied.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGaussian {
    pub position: Vector3<f64>,
    /// World-space orientation, frame rotation composed with the local one.
    pub rotation: Matrix3<f64>,
    /// Linear per-axis extents: k * exp(log_scale).
    pub scale: Vector3<f64>,
    /// Activated opacity in (0, 1).
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Carries a local splat into world space through its triangle's frame:
///
///   position = origin + k * R_frame * position_local
///   rotation = R_frame * R_local
///   scale    = k * exp(log_scale)
pub fn bind_to_world(gaussian: &Gaussian3D, frame: &TriangleFrame) -> BoundGaussian {
    BoundGaussian {
        position: frame.origin + frame.rotation * gaussian.position * frame.scale,
        rotation: frame.rotation * quat_to_rotation(&gaussian.rotation),
        scale: gaussian.log_scale.map(f64::exp) * frame.scale,
        opacity: activate_opacity(gaussian.opacity_logit),
        color: gaussian.color,
    }
}

/// Binds every splat to its parent triangle's frame.
pub fn bind_all(gaussians: &[Gaussian3D], frames: &[TriangleFrame]) -> Result<Vec<BoundGaussian>> {
    gaussians
        .iter()
        .map(|g| {
            let frame = frames.get(g.parent_triangle).ok_or(Error::TriangleIndexOutOfRange {
                index: g.parent_triangle,
                count: frames.len(),
            })?;
            Ok(bind_to_world(g, frame))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{quat_from_axis_angle, quat_identity, quat_mul};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn right_triangle() -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        (
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
    }

    #[test]
    fn unit_right_triangle_frame() {
        let (v0, v1, v2) = right_triangle();
        let f = triangle_frame(&v0, &v1, &v2, 0).unwrap();
        assert_relative_eq!(f.origin, Vector3::new(1.0 / 3.0, 1.0 / 3.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(f.rotation, Matrix3::identity(), epsilon = 1e-15);
        // Area 0.5, scale sqrt(0.5).
        assert_relative_eq!(f.scale, 0.5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_triangle_is_rejected() {
        let v = Vector3::new(1.0, 1.0, 1.0);
        let err = triangle_frame(&v, &(v * 2.0), &(v * 3.0), 7).unwrap_err();
        match err {
            Error::DegenerateTriangle { index: 7, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn frame_is_rigid_equivariant() {
        // Rotating and translating the triangle moves origin and rotation
        // accordingly and leaves the scale unchanged.
        let (v0, v1, v2) = right_triangle();
        let mut rng = crate::rng::stream_rng(0xa7a7, 0);
        for _ in 0..100 {
            let q = quat_from_axis_angle(
                &Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                rng.gen_range(-3.0..3.0),
            );
            let r = quat_to_rotation(&q);
            let t = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let base = triangle_frame(&v0, &v1, &v2, 0).unwrap();
            let moved = triangle_frame(&(r * v0 + t), &(r * v1 + t), &(r * v2 + t), 0).unwrap();
            assert_relative_eq!(moved.origin, r * base.origin + t, epsilon = 1e-12);
            assert_relative_eq!(moved.rotation, r * base.rotation, epsilon = 1e-12);
            assert_relative_eq!(moved.scale, base.scale, epsilon = 1e-12);
        }
    }

    #[test]
    fn binding_is_rigid_invariant_in_local_coordinates() {
        // A splat's position relative to the frame origin, expressed in frame
        // axes and divided by k, recovers the local position under any rigid
        // motion of the triangle.
        let (v0, v1, v2) = right_triangle();
        let g = Gaussian3D {
            position: Vector3::new(0.2, -0.1, 0.05),
            rotation: quat_from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.4),
            log_scale: Vector3::new(-1.0, -1.5, -2.0),
            opacity_logit: 0.3,
            color: Vector3::new(0.5, 0.6, 0.7),
            parent_triangle: 0,
        };
        let q = quat_from_axis_angle(&Vector3::new(0.3, -1.0, 0.8), 1.9);
        let r = quat_to_rotation(&q);
        let t = Vector3::new(0.7, -0.4, 1.3);

        let f0 = triangle_frame(&v0, &v1, &v2, 0).unwrap();
        let f1 = triangle_frame(&(r * v0 + t), &(r * v1 + t), &(r * v2 + t), 0).unwrap();
        let b0 = bind_to_world(&g, &f0);
        let b1 = bind_to_world(&g, &f1);

        let local0 = f0.rotation.transpose() * (b0.position - f0.origin) / f0.scale;
        let local1 = f1.rotation.transpose() * (b1.position - f1.origin) / f1.scale;
        assert_relative_eq!(local0, local1, epsilon = 1e-12);
        assert_relative_eq!(b1.position, r * b0.position + t, epsilon = 1e-12);
        assert_relative_eq!(b1.rotation, r * b0.rotation, epsilon = 1e-12);
        assert_relative_eq!(b1.scale, b0.scale, epsilon = 1e-12);
    }

    #[test]
    fn scale_binding_multiplies_by_sqrt_area() {
        // Doubling triangle edge lengths quadruples area, so k doubles and
        // bound scales double with it.
        let (v0, v1, v2) = right_triangle();
        let g = Gaussian3D {
            position: Vector3::zeros(),
            rotation: quat_identity(),
            log_scale: Vector3::new(0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::new(1.0, 1.0, 1.0),
            parent_triangle: 0,
        };
        let f1 = triangle_frame(&v0, &v1, &v2, 0).unwrap();
        let f2 = triangle_frame(&v0, &(v1 * 2.0), &(v2 * 2.0), 0).unwrap();
        let b1 = bind_to_world(&g, &f1);
        let b2 = bind_to_world(&g, &f2);
        assert_relative_eq!(b2.scale, b1.scale * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn animate_applies_weights_linearly_then_pose() {
        let rig = AvatarRig {
            base_vertices: vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            triangles: vec![],
            blendshapes: vec![
                Blendshape {
                    deltas: vec![Vector3::new(0.0, 1.0, 0.0), Vector3::zeros()],
                },
                Blendshape {
                    deltas: vec![Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0)],
                },
            ],
        };
        let pose = Pose {
            rotation: quat_from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2),
            translation: Vector3::new(10.0, 0.0, 0.0),
        };
        let v = animate(&rig, &[0.5, 0.25], &pose).unwrap();
        // Vertex 0 deforms to (0, 0.5, 0); quarter turn about z sends it to
        // (-0.5, 0, 0), then translation.
        assert_relative_eq!(v[0], Vector3::new(9.5, 0.0, 0.0), epsilon = 1e-12);
        // Vertex 1 deforms to (1, 0, 0.5) -> (0, 1, 0.5) -> translated.
        assert_relative_eq!(v[1], Vector3::new(10.0, 1.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn animate_rejects_wrong_weight_count() {
        let rig = AvatarRig {
            base_vertices: vec![Vector3::zeros()],
            triangles: vec![],
            blendshapes: vec![],
        };
        assert!(matches!(
            animate(&rig, &[1.0], &Pose::identity()),
            Err(Error::WeightCountMismatch { expected: 0, got: 1 })
        ));
    }

    #[test]
    fn zero_weights_identity_pose_is_base_mesh() {
        let rig = AvatarRig {
            base_vertices: vec![Vector3::new(0.3, 0.4, 0.5)],
            triangles: vec![],
            blendshapes: vec![Blendshape {
                deltas: vec![Vector3::new(1.0, 2.0, 3.0)],
            }],
        };
        let v = animate(&rig, &[0.0], &Pose::identity()).unwrap();
        assert_eq!(v[0], rig.base_vertices[0]);
    }

    #[test]
    fn quat_composition_matches_frame_composition() {
        // bind(g, frame after rigid motion R) rotates like R * bind(g, frame).
        let composed = quat_mul(
            &quat_from_axis_angle(&Vector3::z(), 0.5),
            &quat_from_axis_angle(&Vector3::x(), 0.25),
        );
        let direct = quat_to_rotation(&quat_from_axis_angle(&Vector3::z(), 0.5))
            * quat_to_rotation(&quat_from_axis_angle(&Vector3::x(), 0.25));
        assert_relative_eq!(quat_to_rotation(&composed), direct, epsilon = 1e-12);
    }
}
