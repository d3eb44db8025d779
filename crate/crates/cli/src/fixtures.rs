//! Built-in synthetic scenes.
//!
//! Three families, all fully seeded:
//!
//! * `random5`: five random splats on a quad, for gradient-check runs.
//! * `flap`: a front flap over a static back layer across eight
//!   timesteps, for occlusion experiments, plus edit and adversarial
//!   training configs. The flap covers the back layer on the first four
//!   timesteps (creeping sideways a little between them) and leaves the
//!   frame entirely on the rest, so each timestep is cleanly occluded or
//!   visible.
//! * `fit200`: two hundred splats on a quad with four target views
//!   rendered from a reference configuration, for fitting experiments.
//!   The scene's splats are the reference ones with positions, scales,
//!   and opacities perturbed and colors re-rolled.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::{Context, Result};
use rand::Rng;
use wabe_splat::autodiff::{forward_scene, probe_scene};
use wabe_splat::avatar::triangle_frames;
use wabe_splat::editor::{noise_free_target, EditSpec};
use wabe_splat::rasterizer::BlendMode;
use wabe_splat::rng::stream_rng;
use wabe_splat::{Camera, Gaussian3D, ImageBuffer};

use crate::config::{ConfigFile, EditorOverride, WeightsOverride};
use crate::image_io::{grid_image_name, write_ppm};
use crate::scene::{
    BlendshapeRecord, CameraRecord, GaussianRecord, PoseRecord, RigSection, SceneFile,
    TimelineRecord, SCENE_VERSION,
};

fn rest_poses() -> BTreeMap<String, PoseRecord> {
    BTreeMap::from([("rest".to_string(), PoseRecord::identity())])
}

fn static_timeline(steps: u64, weights_per_step: impl Fn(u64) -> Vec<f64>) -> Vec<TimelineRecord> {
    (0..steps)
        .map(|t| TimelineRecord {
            time: t,
            expression_weights: weights_per_step(t),
            pose: "rest".into(),
        })
        .collect()
}

/// Quad vertices centered on the z axis: half-extent `half` at depth `z`.
fn quad(half: f64, z: f64) -> Vec<[f64; 3]> {
    vec![
        [-half, -half, z],
        [half, -half, z],
        [half, half, z],
        [-half, half, z],
    ]
}

/// Splats pinned to a jittered `side x side` world grid over one quad,
/// expressed in their owning triangle's local frame. Spacing-matched scales
/// keep neighbors from stacking, so every splat of the layer holds a clear
/// line of sight to the camera and its color stays identifiable from any
/// frame where the layer itself is unoccluded.
#[allow(clippy::too_many_arguments)]
fn grid_layer(
    rng: &mut impl Rng,
    side: usize,
    half: f64,
    z: f64,
    first_triangle: usize,
    base_color: [f64; 3],
    color_spread: f64,
    logit_range: Range<f64>,
) -> Vec<GaussianRecord> {
    let vertices: Vec<nalgebra::Vector3<f64>> = quad(half, z)
        .iter()
        .map(|v| nalgebra::Vector3::new(v[0], v[1], v[2]))
        .collect();
    let frames = triangle_frames(&vertices, &[[0, 1, 2], [0, 2, 3]])
        .expect("quad triangles are non-degenerate");
    let spacing = 2.0 * half / side as f64;
    let sigma_world = 0.52 * spacing;

    let mut splats = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let x = -half + (col as f64 + 0.5) * spacing + spacing * rng.gen_range(-0.04..0.04);
            let y = -half + (row as f64 + 0.5) * spacing + spacing * rng.gen_range(-0.04..0.04);
            let depth = z + rng.gen_range(-0.02..0.02);
            // The quad splits along its main diagonal; lower-right points
            // belong to the first triangle.
            let tri = usize::from(y > x);
            let frame = &frames[tri];
            let local = frame.rotation.transpose()
                * (nalgebra::Vector3::new(x, y, depth) - frame.origin)
                / frame.scale;
            let ls = (sigma_world / frame.scale).ln();
            let mut color = base_color;
            for c in &mut color {
                *c = (*c + rng.gen_range(-color_spread..color_spread)).clamp(0.02, 0.98);
            }
            splats.push(GaussianRecord {
                position: [local.x, local.y, local.z],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [
                    ls + rng.gen_range(-0.06..0.06),
                    ls + rng.gen_range(-0.06..0.06),
                    ls + rng.gen_range(-0.06..0.06),
                ],
                opacity_logit: rng.gen_range(logit_range.clone()),
                color,
                parent_triangle: first_triangle + tri,
            });
        }
    }
    splats
}

/// Splats scattered over one quad's two triangles: positions drawn from a
/// disk around each triangle centroid (radius keeps the binding regularizer
/// at zero), identity rotations, per-layer color and opacity bands.
#[allow(clippy::too_many_arguments)]
fn scatter(
    rng: &mut impl Rng,
    count: usize,
    first_triangle: usize,
    base_color: [f64; 3],
    logit_range: Range<f64>,
    log_scale_range: Range<f64>,
) -> Vec<GaussianRecord> {
    (0..count)
        .map(|i| {
            let radius = 0.2 + 0.75 * rng.gen::<f64>().sqrt();
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            let mut color = base_color;
            for c in &mut color {
                *c = (*c + rng.gen_range(-0.08..0.08)).clamp(0.02, 0.98);
            }
            GaussianRecord {
                position: [
                    radius * angle.cos(),
                    radius * angle.sin(),
                    rng.gen_range(-0.02..0.02),
                ],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [
                    rng.gen_range(log_scale_range.clone()),
                    rng.gen_range(log_scale_range.clone()),
                    rng.gen_range(log_scale_range.clone()),
                ],
                opacity_logit: rng.gen_range(logit_range.clone()),
                color,
                parent_triangle: first_triangle + i % 2,
            }
        })
        .collect()
}

/// Five random splats on a quad, exported from the gradcheck probe recipe.
pub fn random5_scene() -> SceneFile {
    let probe = probe_scene(5, 5, 48);
    SceneFile {
        version: SCENE_VERSION.into(),
        rig: RigSection {
            base_vertices: quad(1.5, 5.0),
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            blendshapes: vec![],
            poses: rest_poses(),
        },
        gaussians: probe.gaussians.iter().map(GaussianRecord::from_core).collect(),
        cameras: vec![CameraRecord::from_core(&probe.camera)],
        timeline: static_timeline(1, |_| vec![]),
    }
}

pub const FLAP_TIMESTEPS: usize = 8;
pub const FLAP_BACK_COUNT: usize = 49;
pub const FLAP_FRONT_COUNT: usize = 25;

/// Editor preset the flap configs train against (recolor-red).
pub const FLAP_EDIT_PRESET: u32 = 4;

/// Timesteps where the flap covers the back layer.
pub const FLAP_OCCLUDED_TIMES: [usize; 4] = [0, 1, 2, 3];
/// Timesteps where the flap has slid out of frame (weight 1).
pub const FLAP_VISIBLE_TIMES: [usize; 4] = [4, 5, 6, 7];
/// Blendshape weights of the occluded timesteps. The flap creeps sideways
/// while still covering the whole back layer, so no single flap state can
/// satisfy every occluded frame at once and the occluded-frame error never
/// fully drains away.
pub const FLAP_SLIDE_WEIGHTS: [f64; 4] = [0.0, 0.025, 0.05, 0.075];

/// Splat indices of the static back layer.
pub fn flap_back_indices() -> Range<usize> {
    0..FLAP_BACK_COUNT
}

/// Splat indices of the moving front flap.
pub fn flap_front_indices() -> Range<usize> {
    FLAP_BACK_COUNT..FLAP_BACK_COUNT + FLAP_FRONT_COUNT
}

/// Back layer: a teal 7x7 grid at z = 5 filling the view, opaque enough
/// that each cell's color is pinned by any frame where the layer shows.
/// Front flap: a yellow semi-transparent 5x5 grid on a larger quad at
/// z = 4.2 covering the whole frame when closed; the "open" blendshape
/// slides it out of the viewport. During the occluded timesteps the flap
/// creeps sideways over the static back texture, so its own splats cannot
/// absorb all four closed frames and a persistent residual keeps leaking
/// misattributed gradient to whatever the blending mode lets through.
pub fn flap_scene() -> SceneFile {
    let mut vertices = quad(1.5, 5.0);
    vertices.extend(quad(2.0, 4.2));
    let mut deltas = vec![[0.0, 0.0, 0.0]; 4];
    deltas.extend(vec![[5.5, 0.0, 0.0]; 4]);

    let mut rng = stream_rng(0xf1a9, 0);
    let mut gaussians = grid_layer(&mut rng, 7, 1.5, 5.0, 0, [0.15, 0.5, 0.55], 0.12, 1.9..2.3);
    // The back layer starts at the edit preset's own fixed point: frames
    // where it shows then ask nothing of it, so any color movement it picks
    // up during an editing run is occluded-frame leakage, not unfinished
    // convergence toward the edit.
    let spec = EditSpec {
        prompt_id: FLAP_EDIT_PRESET,
        jitter_sigma: 0.0,
        seed: 0,
    };
    for g in &mut gaussians {
        let mut pixel = ImageBuffer::zeros(1, 1);
        pixel.set(0, 0, nalgebra::Vector3::new(g.color[0], g.color[1], g.color[2]));
        let edited = noise_free_target(&pixel, &spec).expect("validated preset");
        let c = edited.get(0, 0);
        g.color = [c.x, c.y, c.z];
    }
    gaussians.extend(grid_layer(
        &mut rng,
        5,
        2.0,
        4.2,
        2,
        [0.85, 0.72, 0.2],
        0.08,
        0.3..0.6,
    ));

    SceneFile {
        version: SCENE_VERSION.into(),
        rig: RigSection {
            base_vertices: vertices,
            triangles: vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]],
            blendshapes: vec![BlendshapeRecord { deltas }],
            poses: rest_poses(),
        },
        gaussians,
        cameras: vec![CameraRecord::from_core(&Camera::facing_z(
            100.0,
            32.0,
            32.0,
            nalgebra::Vector3::zeros(),
            64,
            64,
        ))],
        timeline: static_timeline(FLAP_TIMESTEPS as u64, |t| {
            vec![match FLAP_SLIDE_WEIGHTS.get(t as usize) {
                Some(&w) => w,
                None => 1.0,
            }]
        }),
    }
}

/// Occlusion-editing config over the flap scene: recolor-red preset, no
/// jitter, no adversary. The learning rate sits below the fitting default
/// because Adam's normalized steps random-walk each coordinate at the
/// learning-rate scale regardless of gradient magnitude; the drift this
/// experiment measures has to stay above that noise floor.
pub fn flap_edit_config() -> ConfigFile {
    ConfigFile {
        scene: Some("flap.json".into()),
        iterations: Some(1000),
        learning_rate: Some(1e-3),
        seed: Some(1),
        wabe_enabled: Some(true),
        adversarial_enabled: Some(false),
        editor: Some(EditorOverride {
            prompt_id: Some(FLAP_EDIT_PRESET),
            jitter_sigma: Some(0.0),
            seed: Some(11),
        }),
        ..ConfigFile::default()
    }
}

/// Adversarial-consistency config over the flap scene: recolor-red preset
/// with per-frame jitter and the adversary on.
///
/// Jittered supervision has no stationary point: every preset preserves or
/// expands luminance, so the realized per-frame gain/bias draws drag the
/// whole scene toward the color clamps at a rate set by the learning rate,
/// and a long enough run saturates either way. The run length stops while
/// the degradation is still in progress, and the loss weights give the
/// adversary a real share of the pixel gradient (its raw magnitude is
/// roughly three orders below the reconstruction term's): scaling
/// reconstruction down changes nothing when it is the only pixel term
/// (Adam normalizes per coordinate) but decides the mixture when both are
/// active.
pub fn flap_adv_config() -> ConfigFile {
    ConfigFile {
        scene: Some("flap.json".into()),
        iterations: Some(300),
        learning_rate: Some(1e-3),
        seed: Some(1),
        wabe_enabled: Some(true),
        adversarial_enabled: Some(true),
        weights: Some(WeightsOverride {
            recon: Some(0.1),
            adversarial_g: Some(10.0),
            adversarial_d: Some(1.0),
            ..WeightsOverride::default()
        }),
        editor: Some(EditorOverride {
            prompt_id: Some(FLAP_EDIT_PRESET),
            jitter_sigma: Some(0.1),
            seed: Some(11),
        }),
        ..ConfigFile::default()
    }
}

pub const FIT_GAUSSIANS: usize = 200;
pub const FIT_VIEWS: usize = 4;

/// Fitting fixture: a scene of 200 perturbed splats plus the four target
/// views rendered from the unperturbed reference configuration.
pub fn fit_fixture() -> Result<(SceneFile, Vec<ImageBuffer>)> {
    let vertices = quad(1.5, 5.0);
    let triangles = vec![[0, 1, 2], [0, 2, 3]];
    let cameras: Vec<Camera> = [
        [0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [-0.5, 0.2, 0.0],
        [0.15, -0.45, 0.0],
    ]
    .iter()
    .map(|p| {
        Camera::facing_z(100.0, 32.0, 32.0, nalgebra::Vector3::new(p[0], p[1], p[2]), 64, 64)
    })
    .collect();

    let mut rng = stream_rng(0xf17, 0);
    let reference = scatter(&mut rng, FIT_GAUSSIANS, 0, [0.5, 0.5, 0.5], 1.2..2.0, -2.1..-1.85)
        .into_iter()
        .map(|mut g| {
            g.color = [
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
            ];
            g
        })
        .collect::<Vec<_>>();

    let reference_core: Vec<Gaussian3D> = reference.iter().map(GaussianRecord::to_core).collect();
    let core_vertices: Vec<nalgebra::Vector3<f64>> =
        vertices.iter().map(|v| nalgebra::Vector3::new(v[0], v[1], v[2])).collect();
    let frames = triangle_frames(&core_vertices, &triangles)?;
    let targets = cameras
        .iter()
        .map(|camera| {
            forward_scene(&reference_core, &frames, camera, BlendMode::Standard, false)
                .map(|f| f.output.image)
        })
        .collect::<wabe_splat::Result<Vec<_>>>()?;

    let mut jitter = stream_rng(0xf17, 1);
    let perturbed = reference
        .into_iter()
        .map(|mut g| {
            for p in &mut g.position {
                *p += jitter.gen_range(-0.06..0.06);
            }
            for s in &mut g.log_scale {
                *s += jitter.gen_range(-0.1..0.1);
            }
            g.opacity_logit += jitter.gen_range(-0.3..0.3);
            g.color = [
                jitter.gen_range(0.15..0.85),
                jitter.gen_range(0.15..0.85),
                jitter.gen_range(0.15..0.85),
            ];
            g
        })
        .collect();

    let scene = SceneFile {
        version: SCENE_VERSION.into(),
        rig: RigSection {
            base_vertices: vertices,
            triangles,
            blendshapes: vec![],
            poses: rest_poses(),
        },
        gaussians: perturbed,
        cameras: cameras.iter().map(CameraRecord::from_core).collect(),
        timeline: static_timeline(1, |_| vec![]),
    };
    Ok((scene, targets))
}

fn write_config(config: &ConfigFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config).expect("configs always serialize");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes every fixture into `dir`: scenes, training configs, and the
/// fit target images under `fit_targets/`.
pub fn write_all(dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        written.push(name.to_string());
        dir.join(name)
    };

    crate::scene::write_scene(&random5_scene(), &emit("random5.json"))?;
    crate::scene::write_scene(&flap_scene(), &emit("flap.json"))?;
    write_config(&flap_edit_config(), &emit("flap_edit.json"))?;
    write_config(&flap_adv_config(), &emit("flap_adv.json"))?;

    let (fit_scene, targets) = fit_fixture()?;
    crate::scene::write_scene(&fit_scene, &emit("fit200.json"))?;
    let target_dir = dir.join("fit_targets");
    fs::create_dir_all(&target_dir)
        .with_context(|| format!("creating {}", target_dir.display()))?;
    for (view, image) in targets.iter().enumerate() {
        let name = grid_image_name(view, 0, "ppm");
        write_ppm(image, &target_dir.join(&name))?;
        written.push(format!("fit_targets/{name}"));
    }
    Ok(written)
}
