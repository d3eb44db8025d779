//! Render-edit-aggregate training loop.
//!
//! Each iteration samples one (view, time) cell, renders the avatar there,
//! edits that render, and treats the edit as supervision:
//!
//!   C_t = render(view, t)          in the configured blend mode
//!   E_t = edit(C_t, view, t)       constant (no gradient into the editor)
//!   E_k = edit(render(view, k))    adjacent frame, also constant
//!
//!   L = w.recon (L1 + DSSIM)(C_t, E_t)
//!     + w.adversarial_g L_G(fake)
//!     + w.binding L_const
//!
//! with the discriminator trained on its own weighted objective
//! w.adversarial_d L_D one alternating step per iteration, at a tenth of
//! the generator learning rate. Pixel-space gradients flow through the
//! rasterizer's backward pass; binding gradients attach directly to the
//! parameters. Adam runs on a flat layout of 14 values per splat
//! (position 3, rotation 4, log-scale 3, opacity logit 1, color 3), with
//! bias correction, then updated splats are projected back onto the
//! constraint set (unit quaternion, colors in [0, 1]).
//!
//! Every stochastic choice (cell sampling, adjacent-frame choice,
//! discriminator init, editor jitter) derives from the config seed, so a
//! run is bit-reproducible from its config.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{d_loss, g_loss, make_pairs, Discriminator};
use crate::autodiff::{backward_scene, forward_scene, BackwardConfig, SceneForward};
use crate::avatar::{animate, triangle_frames, AvatarRig, Pose, TriangleFrame};
use crate::buffers::{GradBuffer, ImageBuffer};
use crate::camera::Camera;
use crate::editor::{edit, EditSpec};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::losses::{const_loss, dssim_loss, l1_loss, total_loss, LossWeights};
use crate::rasterizer::BlendMode;
use crate::rng::{derive_seed, stream_rng};

/// Discriminator steps run at this fraction of the generator rate so an
/// early discriminator cannot saturate and starve the generator signal.
pub const DISC_LR_SCALE: f64 = 0.1;

/// Flat parameter slots per splat: position 3, rotation 4, log-scale 3,
/// opacity logit 1, color 3.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// One timeline entry: blendshape weights plus rigid pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineFrame {
    pub weights: Vec<f64>,
    pub pose: Pose,
}

impl TimelineFrame {
    pub fn rest(blendshapes: usize) -> Self {
        TimelineFrame {
            weights: vec![0.0; blendshapes],
            pose: Pose::identity(),
        }
    }
}

/// Everything one editing run needs beyond the rig and its splats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta_wabe: f64,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub adversarial_enabled: bool,
    pub wabe_enabled: bool,
    pub editor: EditSpec,
    pub cameras: Vec<Camera>,
    pub timeline: Vec<TimelineFrame>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta_wabe: 6.0,
            weights: LossWeights::default(),
            learning_rate: 1e-2,
            iterations: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            adversarial_enabled: true,
            wabe_enabled: true,
            editor: EditSpec::default(),
            cameras: Vec::new(),
            timeline: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Blend mode this config trains under.
    pub fn train_mode(&self) -> BlendMode {
        if self.wabe_enabled {
            BlendMode::Wabe {
                beta: self.beta_wabe,
            }
        } else {
            BlendMode::Standard
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Empty { what: "camera list" });
        }
        if self.timeline.is_empty() {
            return Err(Error::Empty { what: "timeline" });
        }
        Ok(())
    }
}

/// Flat Adam accumulators. Layout matches whatever parameter vector the
/// state is used with; the step counter drives bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected update in place:
    ///
    ///   m <- b1 m + (1-b1) g        m_hat = m / (1 - b1^t)
    ///   v <- b2 v + (1-b2) g^2      v_hat = v / (1 - b2^t)
    ///   p <- p - lr m_hat / (sqrt(v_hat) + eps)
    ///
    /// At step 1 the correction makes m_hat/sqrt(v_hat) = sign(g) up to
    /// eps, so the first move is lr in magnitude.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(params.len(), self.m.len(), "optimizer state length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.step += 1;
        let mc = 1.0 - beta1.powi(self.step as i32);
        let vc = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / mc;
            let v_hat = self.v[i] / vc;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Splat parameters flattened in slot order, one block per splat.
pub fn pack_params(gaussians: &[Gaussian3D]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gaussians.len() * PARAMS_PER_GAUSSIAN);
    for g in gaussians {
        out.extend_from_slice(g.position.as_slice());
        out.extend_from_slice(g.rotation.as_slice());
        out.extend_from_slice(g.log_scale.as_slice());
        out.push(g.opacity_logit);
        out.extend_from_slice(g.color.as_slice());
    }
    out
}

/// Writes a flat parameter vector back into the splats it was packed from.
pub fn unpack_params(flat: &[f64], gaussians: &mut [Gaussian3D]) {
    assert_eq!(flat.len(), gaussians.len() * PARAMS_PER_GAUSSIAN, "parameter length");
    for (g, block) in gaussians.iter_mut().zip(flat.chunks_exact(PARAMS_PER_GAUSSIAN)) {
        g.position.copy_from_slice(&block[0..3]);
        g.rotation.copy_from_slice(&block[3..7]);
        g.log_scale.copy_from_slice(&block[7..10]);
        g.opacity_logit = block[10];
        g.color.copy_from_slice(&block[11..14]);
    }
}

/// Gradients flattened to match `pack_params`.
pub fn pack_grads(grads: &GradBuffer) -> Vec<f64> {
    let mut out = Vec::with_capacity(grads.len() * PARAMS_PER_GAUSSIAN);
    for i in 0..grads.len() {
        out.extend_from_slice(grads.position[i].as_slice());
        out.extend_from_slice(grads.rotation[i].as_slice());
        out.extend_from_slice(grads.log_scale[i].as_slice());
        out.push(grads.opacity_logit[i]);
        out.extend_from_slice(grads.color[i].as_slice());
    }
    out
}

/// Mutable state threaded through the training loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub gaussians: Vec<Gaussian3D>,
    pub adam: AdamState,
    pub disc: Discriminator,
    pub disc_adam: AdamState,
    pub sampler: ChaCha8Rng,
}

impl TrainState {
    pub fn new(gaussians: Vec<Gaussian3D>, config: &TrainConfig) -> Self {
        let disc = Discriminator::new(derive_seed(config.seed, 0xd15c));
        TrainState {
            adam: AdamState::new(gaussians.len() * PARAMS_PER_GAUSSIAN),
            disc_adam: AdamState::new(disc.param_count()),
            disc,
            sampler: stream_rng(config.seed, 0x5a3b1e),
            gaussians,
        }
    }
}

/// Loss terms recorded for one iteration (unweighted; `total` applies the
/// configured weights).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub view: usize,
    pub time: usize,
    pub recon: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub binding: f64,
    pub total: f64,
}

/// Triangle frames of the rig animated to one timeline entry.
pub fn scene_frames(
    rig: &AvatarRig,
    timeline: &[TimelineFrame],
    time: usize,
) -> Result<Vec<TriangleFrame>> {
    let entry = &timeline[time];
    let vertices = animate(rig, &entry.weights, &entry.pose)?;
    triangle_frames(&vertices, &rig.triangles)
}

/// Renders one (view, time) cell of the camera/timeline grid.
pub fn render_scene_frame(
    gaussians: &[Gaussian3D],
    rig: &AvatarRig,
    cameras: &[Camera],
    timeline: &[TimelineFrame],
    view: usize,
    time: usize,
    mode: BlendMode,
    cache_contributions: bool,
) -> Result<SceneForward> {
    let frames = scene_frames(rig, timeline, time)?;
    forward_scene(gaussians, &frames, &cameras[view], mode, cache_contributions)
}

/// Uniform adjacent timestep: endpoints have one neighbor, interior
/// timesteps draw either side with equal probability.
fn adjacent_time(rng: &mut impl Rng, time: usize, len: usize) -> usize {
    if len < 2 {
        return time;
    }
    if time == 0 {
        1
    } else if time == len - 1 {
        len - 2
    } else if rng.gen_bool(0.5) {
        time - 1
    } else {
        time + 1
    }
}

fn require_finite(value: f64, term: &'static str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, iteration })
    }
}

/// Re-projects splats whose parameters moved this step: quaternions back
/// to unit norm, colors back into [0, 1]. Untouched blocks are skipped so
/// a frozen optimizer (zero learning rate, or a splat with zero gradient)
/// leaves its parameters bit-identical.
fn project_updated(gaussians: &mut [Gaussian3D], before: &[f64], after: &[f64]) {
    for (gi, g) in gaussians.iter_mut().enumerate() {
        let span = gi * PARAMS_PER_GAUSSIAN..(gi + 1) * PARAMS_PER_GAUSSIAN;
        if before[span.clone()] == after[span] {
            continue;
        }
        let norm = g.rotation.norm();
        if norm > 1e-12 {
            g.rotation /= norm;
        }
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    }
}

/// One render-edit-aggregate iteration. `iteration` is 1-based and only
/// used for metrics and diagnostics.
pub fn train_step(
    state: &mut TrainState,
    rig: &AvatarRig,
    config: &TrainConfig,
    iteration: u64,
) -> Result<StepMetrics> {
    config.validate()?;
    let view = state.sampler.gen_range(0..config.cameras.len());
    let time = state.sampler.gen_range(0..config.timeline.len());
    let adjacent = adjacent_time(&mut state.sampler, time, config.timeline.len());
    let mode = config.train_mode();

    let frames_t = scene_frames(rig, &config.timeline, time)?;
    let forward = forward_scene(&state.gaussians, &frames_t, &config.cameras[view], mode, true)?;
    let rendered_t = &forward.output.image;
    let edited_t = edit(rendered_t, &config.editor, view, time)?;
    // The adjacent edited frame conditions the adversarial pair; it is
    // rendered from the current avatar but held constant.
    let rendered_k = render_scene_frame(
        &state.gaussians,
        rig,
        &config.cameras,
        &config.timeline,
        view,
        adjacent,
        mode,
        false,
    )?;
    let edited_k = edit(&rendered_k.output.image, &config.editor, view, adjacent)?;

    let (l1, l1_grad) = l1_loss(rendered_t, &edited_t)?;
    let (dssim, dssim_grad) = dssim_loss(rendered_t, &edited_t)?;
    let recon = require_finite(l1 + dssim, "recon", iteration)?;
    let (binding, binding_grads) = const_loss(&state.gaussians);
    require_finite(binding, "binding", iteration)?;

    let mut pixel_grad = ImageBuffer::zeros(rendered_t.width(), rendered_t.height());
    for ((dst, &a), &b) in pixel_grad
        .as_mut_slice()
        .iter_mut()
        .zip(l1_grad.as_slice())
        .zip(dssim_grad.as_slice())
    {
        *dst = config.weights.recon * (a + b);
    }

    let mut d_value = 0.0;
    let mut g_value = 0.0;
    let mut disc_grads = None;
    if config.adversarial_enabled {
        let (real, fake) = make_pairs(&edited_t, &edited_k, rendered_t)?;
        let (d, d_g) = d_loss(&state.disc, &real, &fake)?;
        let (g, g_pixels) = g_loss(&state.disc, &fake)?;
        d_value = require_finite(d, "adversarial_d", iteration)?;
        g_value = require_finite(g, "adversarial_g", iteration)?;
        for (dst, &v) in pixel_grad.as_mut_slice().iter_mut().zip(g_pixels.as_slice()) {
            *dst += config.weights.adversarial_g * v;
        }
        disc_grads = Some(d_g);
    }

    let mut grads = backward_scene(
        &forward,
        &state.gaussians,
        &frames_t,
        &config.cameras[view],
        &BackwardConfig::default(),
        &pixel_grad,
    )?;
    grads.add_scaled(&binding_grads, config.weights.binding);

    let before = pack_params(&state.gaussians);
    let mut params = before.clone();
    state.adam.update(
        &mut params,
        &pack_grads(&grads),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    unpack_params(&params, &mut state.gaussians);
    project_updated(&mut state.gaussians, &before, &params);

    if let Some(mut d_g) = disc_grads {
        for v in &mut d_g {
            *v *= config.weights.adversarial_d;
        }
        let mut disc_params = state.disc.flat_params();
        state.disc_adam.update(
            &mut disc_params,
            &d_g,
            config.learning_rate * DISC_LR_SCALE,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        state.disc.set_flat_params(&disc_params);
    }

    let total = total_loss(recon, d_value, g_value, binding, &config.weights);
    require_finite(total, "total", iteration)?;
    Ok(StepMetrics {
        iteration,
        view,
        time,
        recon,
        d_loss: d_value,
        g_loss: g_value,
        binding,
        total,
    })
}

/// Final state plus the per-iteration loss history of a loop.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gaussians: Vec<Gaussian3D>,
    pub disc: Discriminator,
    pub metrics: Vec<StepMetrics>,
}

/// Iterations between checkpoint callbacks.
pub const CHECKPOINT_EVERY: u64 = 100;

/// Runs `config.iterations` editing steps. The callback observes the state
/// every 100 iterations (the caller persists it; the loop stays IO-free).
pub fn train_loop(
    gaussians: Vec<Gaussian3D>,
    rig: &AvatarRig,
    config: &TrainConfig,
    mut checkpoint: Option<&mut dyn FnMut(u64, &[Gaussian3D], &Discriminator) -> Result<()>>,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(gaussians, config);
    let mut metrics = Vec::with_capacity(config.iterations as usize);
    for iteration in 1..=config.iterations {
        metrics.push(train_step(&mut state, rig, config, iteration)?);
        if iteration % CHECKPOINT_EVERY == 0 {
            if let Some(cb) = checkpoint.as_mut() {
                cb(iteration, &state.gaussians, &state.disc)?;
            }
        }
    }
    Ok(TrainOutcome {
        gaussians: state.gaussians,
        disc: state.disc,
        metrics,
    })
}

/// Index of one (view, time) cell in a view-major target grid.
pub fn grid_index(view: usize, time: usize, times: usize) -> usize {
    view * times + time
}

fn require_grid(cameras: usize, times: usize, targets: usize) -> Result<()> {
    if targets != cameras * times {
        return Err(Error::GridMismatch {
            cameras,
            times,
            targets,
        });
    }
    Ok(())
}

/// Fits splats to fixed target images (no editor, no adversary): Standard
/// blending, reconstruction plus binding losses. This is how a starting
/// avatar is produced before editing.
pub fn fit_loop(
    gaussians: Vec<Gaussian3D>,
    rig: &AvatarRig,
    config: &TrainConfig,
    targets: &[ImageBuffer],
) -> Result<TrainOutcome> {
    config.validate()?;
    require_grid(config.cameras.len(), config.timeline.len(), targets.len())?;
    let mut state = TrainState::new(gaussians, config);
    let mut metrics = Vec::with_capacity(config.iterations as usize);
    for iteration in 1..=config.iterations {
        let view = state.sampler.gen_range(0..config.cameras.len());
        let time = state.sampler.gen_range(0..config.timeline.len());
        let target = &targets[grid_index(view, time, config.timeline.len())];

        let frames = scene_frames(rig, &config.timeline, time)?;
        let forward = forward_scene(
            &state.gaussians,
            &frames,
            &config.cameras[view],
            BlendMode::Standard,
            true,
        )?;
        let rendered = &forward.output.image;
        let (l1, l1_grad) = l1_loss(rendered, target)?;
        let (dssim, dssim_grad) = dssim_loss(rendered, target)?;
        let recon = require_finite(l1 + dssim, "recon", iteration)?;
        let (binding, binding_grads) = const_loss(&state.gaussians);
        require_finite(binding, "binding", iteration)?;

        let mut pixel_grad = ImageBuffer::zeros(rendered.width(), rendered.height());
        for ((dst, &a), &b) in pixel_grad
            .as_mut_slice()
            .iter_mut()
            .zip(l1_grad.as_slice())
            .zip(dssim_grad.as_slice())
        {
            *dst = config.weights.recon * (a + b);
        }
        let mut grads = backward_scene(
            &forward,
            &state.gaussians,
            &frames,
            &config.cameras[view],
            &BackwardConfig::default(),
            &pixel_grad,
        )?;
        grads.add_scaled(&binding_grads, config.weights.binding);

        let before = pack_params(&state.gaussians);
        let mut params = before.clone();
        state.adam.update(
            &mut params,
            &pack_grads(&grads),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        unpack_params(&params, &mut state.gaussians);
        project_updated(&mut state.gaussians, &before, &params);

        let total = total_loss(recon, 0.0, 0.0, binding, &config.weights);
        metrics.push(StepMetrics {
            iteration,
            view,
            time,
            recon,
            d_loss: 0.0,
            g_loss: 0.0,
            binding,
            total,
        });
    }
    Ok(TrainOutcome {
        gaussians: state.gaussians,
        disc: state.disc,
        metrics,
    })
}

/// PSNR for a mean-squared error, in dB, capped at 99 (exact matches would
/// otherwise be infinite).
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Quality report for a render grid against reference targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// PSNR of the pooled mean-squared error over every grid cell.
    pub psnr: f64,
    /// Mean SSIM over grid cells.
    pub ssim: f64,
    /// Mean consecutive-frame L1 of the renders minus the same statistic
    /// on the targets; positive means the renders flicker more.
    pub flicker_excess: f64,
    /// Per-view PSNR, pooled over that view's timeline.
    pub per_view_psnr: Vec<f64>,
}

/// Renders the full (camera, timeline) grid in Standard mode (the
/// inference convention) and scores it against the target grid.
pub fn evaluate(
    gaussians: &[Gaussian3D],
    rig: &AvatarRig,
    cameras: &[Camera],
    timeline: &[TimelineFrame],
    targets: &[ImageBuffer],
) -> Result<EvalReport> {
    require_grid(cameras.len(), timeline.len(), targets.len())?;
    let times = timeline.len();
    let mut renders = Vec::with_capacity(cameras.len() * times);
    for view in 0..cameras.len() {
        for time in 0..times {
            let forward = render_scene_frame(
                gaussians,
                rig,
                cameras,
                timeline,
                view,
                time,
                BlendMode::Standard,
                false,
            )?;
            forward
                .output
                .image
                .require_same_shape(&targets[grid_index(view, time, times)], "evaluation target")?;
            renders.push(forward.output.image);
        }
    }

    let mut sq_sum = 0.0;
    let mut sq_count = 0usize;
    let mut ssim_sum = 0.0;
    let mut per_view_psnr = Vec::with_capacity(cameras.len());
    for view in 0..cameras.len() {
        let mut view_sq = 0.0;
        let mut view_count = 0usize;
        for time in 0..times {
            let idx = grid_index(view, time, times);
            let (render, target) = (&renders[idx], &targets[idx]);
            for (a, b) in render.as_slice().iter().zip(target.as_slice()) {
                view_sq += (a - b) * (a - b);
            }
            view_count += render.as_slice().len();
            ssim_sum += 1.0 - dssim_loss(render, target)?.0;
        }
        per_view_psnr.push(psnr_from_mse(view_sq / view_count as f64));
        sq_sum += view_sq;
        sq_count += view_count;
    }

    let flicker = |grid: &[ImageBuffer]| -> f64 {
        if times < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for view in 0..cameras.len() {
            for time in 0..times - 1 {
                let a = &grid[grid_index(view, time, times)];
                let b = &grid[grid_index(view, time + 1, times)];
                sum += a.mean_abs_diff(b);
            }
        }
        sum / (cameras.len() * (times - 1)) as f64
    };

    Ok(EvalReport {
        psnr: psnr_from_mse(sq_sum / sq_count as f64),
        ssim: ssim_sum / (cameras.len() * times) as f64,
        flicker_excess: flicker(&renders) - flicker(targets),
        per_view_psnr,
    })
}
