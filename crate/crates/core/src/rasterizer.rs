//! Splat projection and front-to-back compositing, in standard and
//! occlusion-weighted blend modes.
//!
//! Projection follows the EWA approach: the world covariance is conjugated
//! by the camera rotation and the perspective Jacobian at the splat center,
//!
//!   cov2d = J W Sigma W^T J^T + blur * I,
//!
//! with a 0.3 px^2 isotropic blur standing in for the pixel footprint.
//!
//! Standard compositing accumulates c_k * alpha_k * T_k with transmittance
//! T_k = prod_{j<k} (1 - alpha_j). Weighted mode scales each contribution by
//!
//!   w_k = exp(-beta * (1 - T_k)),
//!
//! which leaves fully visible splats untouched (T = 1 gives w = 1) and
//! exponentially suppresses occluded ones, so they keep their appearance
//! instead of being dragged toward whatever covers them. beta = 0 reproduces
//! standard blending bit for bit.
//!
//! The tiled path and the plain per-pixel reference path share one
//! contribution rule: a splat touches a pixel iff its alpha there is at
//! least 1/255. Tile binning uses the exact bounding box of that footprint,
//! so both paths composite identical contribution sequences and agree
//! bitwise; the reference path exists to keep the binning machinery honest.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

use crate::avatar::BoundGaussian;
use crate::buffers::ImageBuffer;
use crate::camera::Camera;

/// Splats closer than this view-space depth are culled.
pub const NEAR_DEPTH: f64 = 0.01;
/// Isotropic screen-space blur added to every projected covariance, px^2.
pub const COV2D_BLUR: f64 = 0.3;
/// Projected covariances with a smaller pre-blur determinant are culled.
pub const MIN_COV2D_DET: f64 = 1e-12;
/// Upper clamp applied to per-pixel alpha.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Contributions below this alpha are skipped entirely.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Square tile edge for the binned rasterizer, in pixels.
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlendMode {
    Standard,
    /// Occlusion-weighted blending with suppression strength `beta`.
    Wabe { beta: f64 },
}

impl BlendMode {
    #[inline]
    pub fn weight(&self, transmittance: f64) -> f64 {
        match *self {
            BlendMode::Standard => 1.0,
            BlendMode::Wabe { beta } => wabe_weight(transmittance, beta),
        }
    }
}

/// Occlusion weight for a contribution seen through transmittance `t`.
#[inline]
pub fn wabe_weight(transmittance: f64, beta: f64) -> f64 {
    #[cfg(debug_assertions)]
    instrument::WABE_WEIGHT_EVALS.with(|c| c.set(c.get() + 1));
    (-beta * (1.0 - transmittance)).exp()
}

/// Debug-build instrumentation: counts `wabe_weight` evaluations so tests
/// can prove standard-mode paths never touch the weighting. The counter is
/// per thread; run the code under test inside a single-thread rayon pool so
/// every evaluation lands on the thread doing the counting.
#[cfg(debug_assertions)]
pub mod instrument {
    use std::cell::Cell;

    thread_local! {
        pub(super) static WABE_WEIGHT_EVALS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn wabe_weight_eval_count() -> u64 {
        WABE_WEIGHT_EVALS.with(|c| c.get())
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Center in continuous pixel coordinates.
    pub mean: Vector2<f64>,
    /// Screen-space covariance, blur included.
    pub cov: Matrix2<f64>,
    pub inv_cov: Matrix2<f64>,
    /// View-space depth; sort key for compositing order.
    pub depth: f64,
    /// Activated opacity at the splat center, before the per-pixel clamp.
    pub peak_opacity: f64,
    pub color: Vector3<f64>,
    /// Index of the Gaussian this splat came from.
    pub source_index: usize,
}

/// Perspective Jacobian d(pixel)/d(view point) at view-space point `t`.
#[inline]
pub(crate) fn perspective_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * t.x * inv_z2,
        0.0,
        camera.fy * inv_z,
        -camera.fy * t.y * inv_z2,
    )
}

/// Projects one world-space splat. Returns None when the splat cannot
/// contribute: behind the near plane, screen covariance degenerate, or the
/// 3 sigma ellipse misses the viewport.
pub fn project(gaussian: &BoundGaussian, camera: &Camera, source_index: usize) -> Option<Splat2D> {
    project_impl(gaussian, camera, source_index, true)
}

/// Projection with the degeneracy and viewport culls disabled; only the near
/// plane is guarded. Finite difference probes use this so a splat that was
/// visible at the base point can still be evaluated after a perturbation
/// nudges it across a cull boundary.
pub(crate) fn project_unculled(
    gaussian: &BoundGaussian,
    camera: &Camera,
    source_index: usize,
) -> Option<Splat2D> {
    project_impl(gaussian, camera, source_index, false)
}

fn project_impl(
    gaussian: &BoundGaussian,
    camera: &Camera,
    source_index: usize,
    cull: bool,
) -> Option<Splat2D> {
    let t = camera.view_transform(&gaussian.position);
    if t.z <= NEAR_DEPTH {
        return None;
    }
    let mean = camera.project_view_point(&t);
    let j = perspective_jacobian(camera, &t);
    let a = j * camera.rotation;
    let sigma = crate::gaussian::covariance_from_frame(&gaussian.rotation, &gaussian.scale);
    let cov_pre = a * sigma * a.transpose();
    if cull && cov_pre.determinant() < MIN_COV2D_DET {
        return None;
    }
    let cov = cov_pre + Matrix2::identity() * COV2D_BLUR;
    if cull {
        let ex = 3.0 * cov.m11.sqrt();
        let ey = 3.0 * cov.m22.sqrt();
        let (w, h) = (camera.width as f64, camera.height as f64);
        if mean.x + ex < 0.0 || mean.x - ex > w || mean.y + ey < 0.0 || mean.y - ey > h {
            return None;
        }
    }
    // The blur floors both eigenvalues at COV2D_BLUR, so det >= 0.09 and the
    // closed-form inverse is well conditioned.
    let det = cov.m11 * cov.m22 - cov.m12 * cov.m21;
    let inv_cov = Matrix2::new(cov.m22, -cov.m12, -cov.m21, cov.m11) / det;
    Some(Splat2D {
        mean,
        cov,
        inv_cov,
        depth: t.z,
        peak_opacity: gaussian.opacity,
        color: gaussian.color,
        source_index,
    })
}

/// Unclamped alpha o * exp(-q/2) with q the Mahalanobis square at `pixel`.
#[inline]
pub(crate) fn alpha_raw(splat: &Splat2D, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - splat.mean;
    let q = d.dot(&(splat.inv_cov * d));
    splat.peak_opacity * (-0.5 * q).exp()
}

/// Per-pixel alpha of a splat, clamped to at most `ALPHA_CLAMP`.
#[inline]
pub fn alpha_at(splat: &Splat2D, pixel: &Vector2<f64>) -> f64 {
    alpha_raw(splat, pixel).min(ALPHA_CLAMP)
}

/// One composited contribution at one pixel: which splat, the alpha it was
/// composited with, and the transmittance in front of it. Exactly the state
/// the analytic backward pass needs to replay the blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContributionRecord {
    /// Index into the splat slice passed to `render`.
    pub splat: u32,
    pub alpha: f64,
    pub t_before: f64,
}

/// Per-pixel contribution lists in CSR layout, row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    offsets: Vec<u32>,
    records: Vec<ContributionRecord>,
}

impl Contributions {
    pub fn for_pixel(&self, x: usize, y: usize, width: usize) -> &[ContributionRecord] {
        let p = y * width + x;
        &self.records[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Remaining transmittance per pixel, row-major.
    pub final_transmittance: Vec<f64>,
    /// Present only when the forward pass ran with caching enabled.
    pub contributions: Option<Contributions>,
}

/// Splat indices in compositing order: ascending depth, ties broken by
/// source index so equal-depth splats blend deterministically.
fn sorted_order(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.source_index.cmp(&sb.source_index))
    });
    order
}

/// Half extents of the axis-aligned box holding every pixel where this
/// splat's alpha can reach `ALPHA_SKIP`. The ellipse q <= Q with
/// Q = 2 ln(255 o) extends sqrt(Q cov_xx) along x and sqrt(Q cov_yy) along y.
fn footprint_half_extents(splat: &Splat2D) -> Option<Vector2<f64>> {
    let q_max = 2.0 * (255.0 * splat.peak_opacity).ln();
    if q_max <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        (q_max * splat.cov.m11).sqrt(),
        (q_max * splat.cov.m22).sqrt(),
    ))
}

struct Tile {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    splat_order: Vec<u32>,
}

struct TileOutput {
    /// (color, final transmittance) per tile pixel, tile-row-major.
    pixels: Vec<(Vector3<f64>, f64)>,
    /// Records per tile pixel, concatenated; `counts[i]` many for pixel i.
    records: Vec<ContributionRecord>,
    counts: Vec<u32>,
}

/// Composites one pixel given splats in depth order. Shared verbatim by the
/// tiled and reference paths so their outputs are bitwise identical.
#[inline]
fn composite_pixel<'a>(
    splats: &[Splat2D],
    order: impl Iterator<Item = &'a u32>,
    pixel: Vector2<f64>,
    mode: BlendMode,
    mut record: impl FnMut(ContributionRecord),
) -> (Vector3<f64>, f64) {
    let mut color = Vector3::zeros();
    let mut transmittance = 1.0;
    for &idx in order {
        if transmittance < TRANSMITTANCE_STOP {
            break;
        }
        let splat = &splats[idx as usize];
        let alpha = alpha_at(splat, &pixel);
        if alpha < ALPHA_SKIP {
            continue;
        }
        let weight = mode.weight(transmittance);
        color += splat.color * (weight * alpha * transmittance);
        record(ContributionRecord {
            splat: idx,
            alpha,
            t_before: transmittance,
        });
        transmittance *= 1.0 - alpha;
    }
    (color, transmittance)
}

/// Tiled front-to-back rasterization.
///
/// Deterministic for any rayon worker count: tiles are independent and
/// their outputs are scattered in a fixed order.
pub fn render(splats: &[Splat2D], camera: &Camera, mode: BlendMode, cache_contributions: bool) -> RenderOutput {
    let (width, height) = (camera.width, camera.height);
    let order = sorted_order(splats);

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Tile> = (0..tiles_x * tiles_y)
        .map(|i| {
            let x0 = (i % tiles_x) * TILE_SIZE;
            let y0 = (i / tiles_x) * TILE_SIZE;
            Tile {
                x0,
                y0,
                w: TILE_SIZE.min(width - x0),
                h: TILE_SIZE.min(height - y0),
                splat_order: Vec::new(),
            }
        })
        .collect();

    // Bin in global depth order so each tile's list stays sorted.
    for &idx in &order {
        let splat = &splats[idx as usize];
        let Some(ext) = footprint_half_extents(splat) else {
            continue;
        };
        let tx0 = ((splat.mean.x - ext.x) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let ty0 = ((splat.mean.y - ext.y) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let tx1 = (((splat.mean.x + ext.x) / TILE_SIZE as f64).floor() as isize).min(tiles_x as isize - 1);
        let ty1 = (((splat.mean.y + ext.y) / TILE_SIZE as f64).floor() as isize).min(tiles_y as isize - 1);
        if tx1 < tx0 as isize || ty1 < ty0 as isize {
            continue;
        }
        for ty in ty0..=ty1 as usize {
            for tx in tx0..=tx1 as usize {
                tiles[ty * tiles_x + tx].splat_order.push(idx);
            }
        }
    }

    let tile_outputs: Vec<TileOutput> = tiles
        .par_iter()
        .map(|tile| {
            let mut pixels = Vec::with_capacity(tile.w * tile.h);
            let mut records = Vec::new();
            let mut counts = Vec::with_capacity(tile.w * tile.h);
            for dy in 0..tile.h {
                for dx in 0..tile.w {
                    let pixel = Vector2::new(
                        (tile.x0 + dx) as f64 + 0.5,
                        (tile.y0 + dy) as f64 + 0.5,
                    );
                    let before = records.len();
                    let (color, transmittance) = composite_pixel(
                        splats,
                        tile.splat_order.iter(),
                        pixel,
                        mode,
                        |r| {
                            if cache_contributions {
                                records.push(r);
                            }
                        },
                    );
                    pixels.push((color, transmittance));
                    counts.push((records.len() - before) as u32);
                }
            }
            TileOutput {
                pixels,
                records,
                counts,
            }
        })
        .collect();

    // Fixed-order scatter back to row-major buffers.
    let mut image = ImageBuffer::zeros(width, height);
    let mut final_transmittance = vec![1.0; width * height];
    let mut record_counts = vec![0u32; width * height];
    for (tile, out) in tiles.iter().zip(&tile_outputs) {
        let mut i = 0;
        for dy in 0..tile.h {
            for dx in 0..tile.w {
                let (x, y) = (tile.x0 + dx, tile.y0 + dy);
                image.set(x, y, out.pixels[i].0);
                final_transmittance[y * width + x] = out.pixels[i].1;
                record_counts[y * width + x] = out.counts[i];
                i += 1;
            }
        }
    }

    let contributions = cache_contributions.then(|| {
        let mut offsets = Vec::with_capacity(width * height + 1);
        let mut total = 0u32;
        offsets.push(0);
        for &c in &record_counts {
            total += c;
            offsets.push(total);
        }
        let mut records = vec![
            ContributionRecord {
                splat: 0,
                alpha: 0.0,
                t_before: 0.0
            };
            total as usize
        ];
        for (tile, out) in tiles.iter().zip(&tile_outputs) {
            let mut consumed = 0usize;
            let mut i = 0;
            for dy in 0..tile.h {
                for dx in 0..tile.w {
                    let p = (tile.y0 + dy) * width + tile.x0 + dx;
                    let n = out.counts[i] as usize;
                    records[offsets[p] as usize..offsets[p] as usize + n]
                        .copy_from_slice(&out.records[consumed..consumed + n]);
                    consumed += n;
                    i += 1;
                }
            }
        }
        Contributions { offsets, records }
    });

    RenderOutput {
        image,
        final_transmittance,
        contributions,
    }
}

/// Reference rasterizer: evaluates every splat at every pixel with no
/// binning. Slow, but structurally too simple to be wrong; the tiled path
/// is tested against it.
pub fn render_reference(splats: &[Splat2D], camera: &Camera, mode: BlendMode) -> ImageBuffer {
    let order = sorted_order(splats);
    let mut image = ImageBuffer::zeros(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let (color, _) = composite_pixel(splats, order.iter(), pixel, mode, |_| {});
            image.set(x, y, color);
        }
    }
    image
}
