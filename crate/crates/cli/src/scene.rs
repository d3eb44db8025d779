//! Scene documents: one JSON file holding a rig, its bound splats, the
//! cameras, and a timeline.
//!
//! Parsing is strict. The version string is checked, unknown fields are
//! rejected by name, every number must be finite, and every index or pose
//! reference must resolve before a document becomes usable core types.
//! Serialization is the exact inverse (parse, serialize, parse is
//! value-identical), and checkpoints reuse it: a checkpoint is a complete
//! scene file with updated splats, directly renderable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use wabe_splat::avatar::{AvatarRig, Blendshape, Pose};
use wabe_splat::trainer::TimelineFrame;
use wabe_splat::{Camera, Gaussian3D};

pub const SCENE_VERSION: &str = "wabe-splat/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: String,
    pub rig: RigSection,
    pub gaussians: Vec<GaussianRecord>,
    pub cameras: Vec<CameraRecord>,
    pub timeline: Vec<TimelineRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSection {
    pub base_vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub blendshapes: Vec<BlendshapeRecord>,
    /// Named rigid poses the timeline refers to.
    pub poses: BTreeMap<String, PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendshapeRecord {
    pub deltas: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Quaternion [w, x, y, z].
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianRecord {
    pub position: [f64; 3],
    /// Quaternion [w, x, y, z].
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub parent_triangle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-view rotation, rows of the matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineRecord {
    /// Strictly increasing frame label; ordering, not value, drives training.
    pub time: u64,
    pub expression_weights: Vec<f64>,
    /// Name of a pose in the rig's pose table.
    pub pose: String,
}

/// A validated document converted to core types, with the original kept
/// for writing checkpoints.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub doc: SceneFile,
    pub rig: AvatarRig,
    pub gaussians: Vec<Gaussian3D>,
    pub cameras: Vec<Camera>,
    pub timeline: Vec<TimelineFrame>,
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn vec4(v: [f64; 4]) -> Vector4<f64> {
    Vector4::new(v[0], v[1], v[2], v[3])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn finite3(v: &[f64; 3]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl GaussianRecord {
    pub fn to_core(&self) -> Gaussian3D {
        Gaussian3D {
            position: vec3(self.position),
            rotation: vec4(self.rotation),
            log_scale: vec3(self.log_scale),
            opacity_logit: self.opacity_logit,
            color: vec3(self.color),
            parent_triangle: self.parent_triangle,
        }
    }

    pub fn from_core(g: &Gaussian3D) -> Self {
        GaussianRecord {
            position: arr3(&g.position),
            rotation: [g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]],
            log_scale: arr3(&g.log_scale),
            opacity_logit: g.opacity_logit,
            color: arr3(&g.color),
            parent_triangle: g.parent_triangle,
        }
    }
}

impl CameraRecord {
    pub fn to_core(&self) -> Camera {
        let r = self.rotation;
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: vec3(self.translation),
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_core(c: &Camera) -> Self {
        let m = &c.rotation;
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: arr3(&c.translation),
            width: c.width,
            height: c.height,
        }
    }
}

impl PoseRecord {
    pub fn to_core(&self) -> Pose {
        Pose {
            rotation: vec4(self.rotation),
            translation: vec3(self.translation),
        }
    }

    pub fn identity() -> Self {
        PoseRecord {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }
}

impl SceneFile {
    /// Validates the document and converts it to core types.
    pub fn resolve(&self) -> Result<LoadedScene> {
        ensure!(
            self.version == SCENE_VERSION,
            "unsupported version {:?} (expected {:?})",
            self.version,
            SCENE_VERSION
        );
        self.check_finite()?;

        let rig = AvatarRig {
            base_vertices: self.rig.base_vertices.iter().map(|v| vec3(*v)).collect(),
            triangles: self.rig.triangles.clone(),
            blendshapes: self
                .rig
                .blendshapes
                .iter()
                .map(|b| Blendshape {
                    deltas: b.deltas.iter().map(|d| vec3(*d)).collect(),
                })
                .collect(),
        };
        rig.validate()?;

        for (name, pose) in &self.rig.poses {
            ensure!(
                vec4(pose.rotation).norm() > 1e-6,
                "pose {name:?} has a degenerate quaternion"
            );
        }
        ensure!(!self.gaussians.is_empty(), "scene has no gaussians");
        for (i, g) in self.gaussians.iter().enumerate() {
            ensure!(
                g.parent_triangle < self.rig.triangles.len(),
                "gaussians[{i}].parent_triangle {} out of range (rig has {} triangles)",
                g.parent_triangle,
                self.rig.triangles.len()
            );
            ensure!(
                vec4(g.rotation).norm() > 1e-6,
                "gaussians[{i}] has a degenerate quaternion"
            );
        }
        ensure!(!self.cameras.is_empty(), "scene has no cameras");
        for (i, c) in self.cameras.iter().enumerate() {
            ensure!(
                c.width > 0 && c.height > 0,
                "cameras[{i}] has a zero image dimension"
            );
            ensure!(
                c.fx != 0.0 && c.fy != 0.0,
                "cameras[{i}] has a zero focal length"
            );
        }
        ensure!(!self.timeline.is_empty(), "scene has an empty timeline");
        let mut timeline = Vec::with_capacity(self.timeline.len());
        for (i, entry) in self.timeline.iter().enumerate() {
            if i > 0 {
                ensure!(
                    entry.time > self.timeline[i - 1].time,
                    "timeline[{i}].time {} does not increase past {}",
                    entry.time,
                    self.timeline[i - 1].time
                );
            }
            ensure!(
                entry.expression_weights.len() == self.rig.blendshapes.len(),
                "timeline[{i}] has {} expression weights; rig has {} blendshapes",
                entry.expression_weights.len(),
                self.rig.blendshapes.len()
            );
            let Some(pose) = self.rig.poses.get(&entry.pose) else {
                bail!("timeline[{i}] refers to unknown pose {:?}", entry.pose);
            };
            timeline.push(TimelineFrame {
                weights: entry.expression_weights.clone(),
                pose: pose.to_core(),
            });
        }

        Ok(LoadedScene {
            doc: self.clone(),
            rig,
            gaussians: self.gaussians.iter().map(GaussianRecord::to_core).collect(),
            cameras: self.cameras.iter().map(CameraRecord::to_core).collect(),
            timeline,
        })
    }

    fn check_finite(&self) -> Result<()> {
        for (i, v) in self.rig.base_vertices.iter().enumerate() {
            ensure!(finite3(v), "rig.base_vertices[{i}] is not finite");
        }
        for (i, b) in self.rig.blendshapes.iter().enumerate() {
            ensure!(
                b.deltas.iter().all(finite3),
                "rig.blendshapes[{i}] has a non-finite delta"
            );
        }
        for (name, p) in &self.rig.poses {
            ensure!(
                p.rotation.iter().all(|x| x.is_finite()) && finite3(&p.translation),
                "pose {name:?} is not finite"
            );
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            ensure!(
                finite3(&g.position)
                    && g.rotation.iter().all(|x| x.is_finite())
                    && finite3(&g.log_scale)
                    && g.opacity_logit.is_finite()
                    && finite3(&g.color),
                "gaussians[{i}] is not finite"
            );
        }
        for (i, c) in self.cameras.iter().enumerate() {
            ensure!(
                [c.fx, c.fy, c.cx, c.cy].iter().all(|x| x.is_finite())
                    && c.rotation.iter().all(finite3)
                    && finite3(&c.translation),
                "cameras[{i}] is not finite"
            );
        }
        for (i, t) in self.timeline.iter().enumerate() {
            ensure!(
                t.expression_weights.iter().all(|x| x.is_finite()),
                "timeline[{i}] has a non-finite expression weight"
            );
        }
        Ok(())
    }

    /// The same document with its splats replaced (checkpoints, fit output).
    pub fn with_gaussians(&self, gaussians: &[Gaussian3D]) -> SceneFile {
        SceneFile {
            gaussians: gaussians.iter().map(GaussianRecord::from_core).collect(),
            ..self.clone()
        }
    }
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: SceneFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    doc.resolve()
        .with_context(|| format!("validating {}", path.display()))
}

pub fn write_scene(doc: &SceneFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("scene documents always serialize");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scene() -> SceneFile {
        SceneFile {
            version: SCENE_VERSION.into(),
            rig: RigSection {
                base_vertices: vec![
                    [-1.0, -1.0, 5.0],
                    [1.0, -1.0, 5.0],
                    [1.0, 1.0, 5.0],
                    [-1.0, 1.0, 5.0],
                ],
                triangles: vec![[0, 1, 2], [0, 2, 3]],
                blendshapes: vec![BlendshapeRecord {
                    deltas: vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
                }],
                poses: BTreeMap::from([("rest".to_string(), PoseRecord::identity())]),
            },
            gaussians: vec![GaussianRecord {
                position: [0.1, -0.07, 0.02],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [-1.9, -2.1, -2.3],
                opacity_logit: 0.8,
                color: [0.6, 0.3, 0.2],
                parent_triangle: 1,
            }],
            cameras: vec![CameraRecord {
                fx: 40.0,
                fy: 40.0,
                cx: 16.0,
                cy: 16.0,
                rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                translation: [0.0, 0.0, 0.0],
                width: 32,
                height: 32,
            }],
            timeline: vec![
                TimelineRecord {
                    time: 0,
                    expression_weights: vec![0.0],
                    pose: "rest".into(),
                },
                TimelineRecord {
                    time: 1,
                    expression_weights: vec![1.0],
                    pose: "rest".into(),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_value_identical() {
        let scene = minimal_scene();
        let text = serde_json::to_string_pretty(&scene).unwrap();
        let back: SceneFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);
        let again = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(again, text);
    }

    #[test]
    fn unknown_fields_are_rejected_by_name() {
        let mut value = serde_json::to_value(minimal_scene()).unwrap();
        value["rig"]["vertices_count"] = 4.into();
        let err = serde_json::from_value::<SceneFile>(value).unwrap_err();
        assert!(err.to_string().contains("vertices_count"), "{err}");
    }

    #[test]
    fn resolve_produces_matching_core_types() {
        let loaded = minimal_scene().resolve().unwrap();
        assert_eq!(loaded.rig.triangles.len(), 2);
        assert_eq!(loaded.gaussians.len(), 1);
        assert_eq!(loaded.gaussians[0].parent_triangle, 1);
        assert_eq!(loaded.cameras[0].width, 32);
        assert_eq!(loaded.timeline.len(), 2);
        assert_eq!(loaded.timeline[1].weights, vec![1.0]);
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut scene = minimal_scene();
        scene.version = "wabe-splat/2".into();
        let err = scene.resolve().unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn non_finite_numbers_are_rejected_with_a_location() {
        let mut scene = minimal_scene();
        scene.gaussians[0].color[1] = f64::NAN;
        let err = scene.resolve().unwrap_err();
        assert!(err.to_string().contains("gaussians[0]"), "{err}");
    }

    #[test]
    fn dangling_references_are_rejected() {
        let mut scene = minimal_scene();
        scene.gaussians[0].parent_triangle = 5;
        assert!(scene.resolve().is_err());

        let mut scene = minimal_scene();
        scene.timeline[0].pose = "walk".into();
        let err = scene.resolve().unwrap_err();
        assert!(err.to_string().contains("walk"), "{err}");

        let mut scene = minimal_scene();
        scene.timeline[0].expression_weights = vec![0.0, 0.5];
        assert!(scene.resolve().is_err());

        let mut scene = minimal_scene();
        scene.timeline[1].time = 0;
        let err = scene.resolve().unwrap_err();
        assert!(err.to_string().contains("increase"), "{err}");
    }

    #[test]
    fn camera_record_round_trips_through_core() {
        let record = minimal_scene().cameras[0].clone();
        let back = CameraRecord::from_core(&record.to_core());
        assert_eq!(back, record);
    }

    #[test]
    fn with_gaussians_replaces_only_the_splats() {
        let scene = minimal_scene();
        let loaded = scene.resolve().unwrap();
        let mut moved = loaded.gaussians.clone();
        moved[0].position.x = 0.25;
        let next = scene.with_gaussians(&moved);
        assert_eq!(next.gaussians[0].position[0], 0.25);
        assert_eq!(next.rig, scene.rig);
        assert_eq!(next.timeline, scene.timeline);
    }
}
