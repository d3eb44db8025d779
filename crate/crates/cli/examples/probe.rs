//! Scratch harness for sizing the flap ablation experiments.

use std::time::Instant;

use wabe_splat::adversarial::Discriminator;
use wabe_splat::editor::noise_free_target;
use wabe_splat::rasterizer::BlendMode;
use wabe_splat::trainer::{evaluate, render_scene_frame, train_loop, TrainConfig};
use wabe_splat_cli::fixtures::{flap_adv_config, flap_back_indices, flap_edit_config, flap_scene};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("a5");
    let iters: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    match which {
        "a3" => a3(iters),
        "floor" => floor(iters),
        "traj" => traj(iters),
        "jit" => jit(),
        "dump" => dump(iters),
        "mag" => mag(),
        _ => a5(iters),
    }
}

fn jit() -> anyhow::Result<()> {
    let base = flap_adv_config().apply(TrainConfig::default());
    let mut spec = base.editor;
    spec.jitter_sigma = 0.1;
    let mut gsum = 0.0;
    for time in 0..8 {
        let (g, b) = wabe_splat::editor::jitter_params(&spec, 0, time);
        gsum += g;
        println!("time {time}: gain {g:.4} bias {b:+.4}");
    }
    println!("mean gain {:.4}", gsum / 8.0);
    Ok(())
}

fn mag() -> anyhow::Result<()> {
    use wabe_splat::adversarial::{g_loss, make_pairs};
    use wabe_splat::editor::edit;
    use wabe_splat::losses::{dssim_loss, l1_loss};

    let scene = flap_scene().resolve()?;
    let mut cfg = flap_adv_config().apply(TrainConfig::default());
    cfg.cameras = scene.cameras.clone();
    cfg.timeline = scene.timeline.clone();
    let mode = cfg.train_mode();
    for (t, k) in [(1usize, 2usize), (5, 6)] {
        let fwd_t = render_scene_frame(
            &scene.gaussians, &scene.rig, &scene.cameras, &scene.timeline, 0, t, mode, false,
        )?;
        let fwd_k = render_scene_frame(
            &scene.gaussians, &scene.rig, &scene.cameras, &scene.timeline, 0, k, mode, false,
        )?;
        let edited_t = edit(&fwd_t.output.image, &cfg.editor, 0, t)?;
        let edited_k = edit(&fwd_k.output.image, &cfg.editor, 0, k)?;
        let (_, l1_grad) = l1_loss(&fwd_t.output.image, &edited_t)?;
        let (_, dssim_grad) = dssim_loss(&fwd_t.output.image, &edited_t)?;
        let recon_mean: f64 = l1_grad
            .as_slice()
            .iter()
            .zip(dssim_grad.as_slice())
            .map(|(a, b)| (a + b).abs())
            .sum::<f64>()
            / l1_grad.as_slice().len() as f64;
        let disc = Discriminator::new(1);
        let (_, fake) = make_pairs(&edited_t, &edited_k, &fwd_t.output.image)?;
        let (gv, g_pixels) = g_loss(&disc, &fake)?;
        let g_mean: f64 = g_pixels.as_slice().iter().map(|v| v.abs()).sum::<f64>()
            / g_pixels.as_slice().len() as f64;
        println!(
            "frame t={t}: recon |grad| {recon_mean:.3e} (x10 = {:.3e})  g |grad| {g_mean:.3e}  g_loss {gv:.4}",
            10.0 * recon_mean
        );
    }
    Ok(())
}

fn dump(iters: u64) -> anyhow::Result<()> {
    let lr: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let preset: u32 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let scene = flap_scene().resolve()?;
    let mut cfg = flap_adv_config().apply(TrainConfig::default());
    cfg.learning_rate = lr;
    cfg.editor.prompt_id = preset;
    cfg.adversarial_enabled = false;
    cfg.cameras = scene.cameras.clone();
    cfg.timeline = scene.timeline.clone();
    cfg.iterations = iters;
    let out = train_loop(scene.gaussians.clone(), &scene.rig, &cfg, None)?;
    let back = flap_back_indices();
    let is_back = |i: usize| back.contains(&i);
    for (label, pick) in [("back", true), ("front", false)] {
        let idx: Vec<usize> = (0..scene.gaussians.len())
            .filter(|&i| is_back(i) == pick)
            .collect();
        let n = idx.len() as f64;
        let mut dpos = 0.0;
        let mut dls = 0.0;
        let mut dlogit = 0.0;
        let mut dcol = 0.0;
        let mut col = [0.0f64; 3];
        let mut logit = 0.0;
        for &i in &idx {
            let (a, b) = (&scene.gaussians[i], &out.gaussians[i]);
            dpos += (a.position - b.position).norm() / n;
            dls += (a.log_scale - b.log_scale).norm() / n;
            dlogit += (a.opacity_logit - b.opacity_logit).abs() / n;
            for c in 0..3 {
                dcol += (a.color[c] - b.color[c]).abs() / (3.0 * n);
                col[c] += b.color[c] / n;
            }
            logit += b.opacity_logit / n;
        }
        println!(
            "{label}: |dpos| {dpos:.3} |dls| {dls:.3} |dlogit| {dlogit:.3} |dcol| {dcol:.3} \
             final col [{:.2} {:.2} {:.2}] logit {logit:.2}",
            col[0], col[1], col[2]
        );
    }
    Ok(())
}

fn traj(iters: u64) -> anyhow::Result<()> {
    let lr: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let scene = flap_scene().resolve()?;
    let mut base = flap_adv_config().apply(TrainConfig::default());
    base.learning_rate = lr;
    base.cameras = scene.cameras.clone();
    base.timeline = scene.timeline.clone();
    base.iterations = iters;

    let mut nf = Vec::new();
    for view in 0..scene.cameras.len() {
        for time in 0..scene.timeline.len() {
            let fwd = render_scene_frame(
                &scene.gaussians,
                &scene.rig,
                &scene.cameras,
                &scene.timeline,
                view,
                time,
                BlendMode::Standard,
                false,
            )?;
            nf.push(noise_free_target(&fwd.output.image, &base.editor)?);
        }
    }
    let b = evaluate(&scene.gaussians, &scene.rig, &scene.cameras, &scene.timeline, &nf)?;
    println!("iter 0: {:.3} dB (baseline)", b.psnr);

    for adv in [false, true] {
        let mut cfg = base.clone();
        cfg.adversarial_enabled = adv;
        let scene2 = scene.clone();
        let nf2 = nf.clone();
        let mut cb = move |iter: u64,
                           g: &[wabe_splat::gaussian::Gaussian3D],
                           _d: &Discriminator|
              -> wabe_splat::error::Result<()> {
            let r = evaluate(g, &scene2.rig, &scene2.cameras, &scene2.timeline, &nf2)?;
            println!("  adv={adv} iter {iter}: {:.3} dB", r.psnr);
            Ok(())
        };
        train_loop(scene.gaussians.clone(), &scene.rig, &cfg, Some(&mut cb))?;
    }
    Ok(())
}

fn floor(iters: u64) -> anyhow::Result<()> {
    let scene = flap_scene().resolve()?;
    let base = flap_edit_config().apply(TrainConfig::default());
    for wabe in [true, false] {
        let mut vis = base.clone();
        vis.cameras = scene.cameras.clone();
        vis.timeline = scene.timeline[4..].to_vec();
        vis.iterations = iters;
        vis.wabe_enabled = wabe;
        let mut vis2 = vis.clone();
        vis2.seed = 2;

        let g_a = train_loop(scene.gaussians.clone(), &scene.rig, &vis, None)?.gaussians;
        let g_b = train_loop(scene.gaussians.clone(), &scene.rig, &vis2, None)?.gaussians;

        let n = flap_back_indices().len() as f64;
        let mut drift = [0.0f64; 3];
        for i in flap_back_indices() {
            for c in 0..3 {
                drift[c] += (g_a[i].color[c] - g_b[i].color[c]).abs() / n;
            }
        }
        println!(
            "wabe={wabe}: seed1-vs-seed2 visible-only drift [{:.4} {:.4} {:.4}]",
            drift[0], drift[1], drift[2]
        );
    }
    Ok(())
}

fn a3(iters: u64) -> anyhow::Result<()> {
    let seed: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let scene = flap_scene().resolve()?;
    let base = flap_edit_config().apply(TrainConfig::default());
    for wabe in [true, false] {
        let t0 = Instant::now();
        let mut full = base.clone();
        full.cameras = scene.cameras.clone();
        full.timeline = scene.timeline.clone();
        full.iterations = iters;
        full.wabe_enabled = wabe;
        full.seed = seed;
        let mut vis = full.clone();
        vis.timeline = scene.timeline[4..].to_vec();

        let g_full = train_loop(scene.gaussians.clone(), &scene.rig, &full, None)?.gaussians;
        let g_vis = train_loop(scene.gaussians.clone(), &scene.rig, &vis, None)?.gaussians;

        let n = flap_back_indices().len() as f64;
        let mut drift = [0.0f64; 3];
        for i in flap_back_indices() {
            for c in 0..3 {
                drift[c] += (g_full[i].color[c] - g_vis[i].color[c]).abs() / n;
            }
        }
        let max = drift.iter().cloned().fold(0.0, f64::max);
        println!(
            "wabe={wabe}: drift [{:.4} {:.4} {:.4}] max {:.4} ({:.1}s)",
            drift[0],
            drift[1],
            drift[2],
            max,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn a5(iters: u64) -> anyhow::Result<()> {
    let arg = |n: usize, d: f64| -> f64 {
        std::env::args()
            .nth(n)
            .and_then(|s| s.parse().ok())
            .unwrap_or(d)
    };
    let lr = arg(3, 1e-2);
    let preset = arg(4, 4.0) as u32;
    let w_g = arg(5, 0.01);
    let w_d = arg(6, 0.01);
    let n_seeds = arg(7, 5.0) as u64;
    let w_recon = arg(8, 10.0);
    println!("iters {iters} lr {lr} preset {preset} w_g {w_g} w_d {w_d} w_recon {w_recon}");
    let scene = flap_scene().resolve()?;
    let mut base = flap_adv_config().apply(TrainConfig::default());
    base.learning_rate = lr;
    base.editor.prompt_id = preset;
    base.weights.adversarial_g = w_g;
    base.weights.adversarial_d = w_d;
    base.weights.recon = w_recon;

    let mut nf = Vec::new();
    for view in 0..scene.cameras.len() {
        for time in 0..scene.timeline.len() {
            let fwd = render_scene_frame(
                &scene.gaussians,
                &scene.rig,
                &scene.cameras,
                &scene.timeline,
                view,
                time,
                BlendMode::Standard,
                false,
            )?;
            nf.push(noise_free_target(&fwd.output.image, &base.editor)?);
        }
    }

    let baseline = evaluate(&scene.gaussians, &scene.rig, &scene.cameras, &scene.timeline, &nf)?;
    println!("baseline (untrained vs noise-free targets): {:.3} dB", baseline.psnr);

    let mut wins = 0;
    for seed in 1..=n_seeds {
        let t0 = Instant::now();
        let mut on = base.clone();
        on.cameras = scene.cameras.clone();
        on.timeline = scene.timeline.clone();
        on.iterations = iters;
        on.seed = seed;
        let mut off = on.clone();
        off.adversarial_enabled = false;

        let out_on = train_loop(scene.gaussians.clone(), &scene.rig, &on, None)?;
        let out_off = train_loop(scene.gaussians.clone(), &scene.rig, &off, None)?;
        let p_on = evaluate(&out_on.gaussians, &scene.rig, &scene.cameras, &scene.timeline, &nf)?;
        let p_off = evaluate(&out_off.gaussians, &scene.rig, &scene.cameras, &scene.timeline, &nf)?;
        if p_on.psnr >= p_off.psnr {
            wins += 1;
        }
        println!(
            "seed {seed}: on {:.3} off {:.3} diff {:+.3} flicker on {:+.5} off {:+.5} ({:.1}s)",
            p_on.psnr,
            p_off.psnr,
            p_on.psnr - p_off.psnr,
            p_on.flicker_excess,
            p_off.flicker_excess,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("wins {wins}/{n_seeds} at {iters} iters");
    Ok(())
}
