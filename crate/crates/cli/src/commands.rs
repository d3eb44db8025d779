//! The command-line surface.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing
//! required arguments), 2 for runtime failures (unreadable files,
//! validation errors, non-finite losses). Thread count comes from
//! `--threads`, else the `WABE_SPLAT_THREADS` environment variable, else
//! rayon's default; a fixed count pins a dedicated pool so output is
//! reproducible under any parallelism anyway.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use wabe_splat::adversarial::{to_blob, Discriminator};
use wabe_splat::autodiff::{gradcheck, BackwardConfig, GradcheckSteps, WPolicy};
use wabe_splat::rasterizer::BlendMode;
use wabe_splat::rng::stream_rng;
use wabe_splat::trainer::{
    evaluate, fit_loop, render_scene_frame, scene_frames, train_loop, EvalReport, StepMetrics,
    TimelineFrame, TrainConfig, TrainOutcome,
};
use wabe_splat::{Gaussian3D, ImageBuffer};

use crate::config::ConfigFile;
use crate::fixtures;
use crate::image_io::{grid_image_name, read_ppm, write_png, write_ppm};
use crate::scene::{load_scene, write_scene, LoadedScene};

#[derive(Parser)]
#[command(
    name = "wabe-splat",
    version,
    about = "Differentiable Gaussian-splat engine for editing animatable avatars"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed; overrides any seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for rendering and gradients (default: the
    /// WABE_SPLAT_THREADS environment variable, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Standard,
    Wabe,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize splats against fixed target images (no editor).
    Fit {
        #[arg(long)]
        scene: PathBuf,
        /// Directory of target images named like view00_time000.ppm.
        #[arg(long)]
        targets: PathBuf,
        /// Override the iteration count from the config.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Run the full editing loop described by --config.
    Edit {
        /// Override the iteration count from the config.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Render every (camera, timestep) cell of a scene.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
        mode: ModeArg,
        /// Occlusion weight sharpness for --mode wabe.
        #[arg(long, default_value_t = 6.0)]
        beta: f64,
        /// Also write PNG copies of every image.
        #[arg(long)]
        png: bool,
    },
    /// Render a scene driven by another scene's timeline (reenactment).
    Animate {
        #[arg(long)]
        scene: PathBuf,
        /// Scene whose timeline drives the animation.
        #[arg(long)]
        driver: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
        mode: ModeArg,
        #[arg(long, default_value_t = 6.0)]
        beta: f64,
        #[arg(long)]
        png: bool,
    },
    /// Score a scene's renders against target images.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        targets: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        beta: f64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write the built-in synthetic scenes and configs.
    MakeFixtures,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let threads = match resolve_threads(cli.threads) {
        Ok(t) => t,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            return 1;
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let work = || dispatch(&cli);
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(work),
            Err(e) => Err(Failure::Runtime(e.into())),
        },
        None => work(),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("WABE_SPLAT_THREADS") {
            Ok(text) => Some(text.parse().map_err(|_| {
                usage(format!("WABE_SPLAT_THREADS must be a positive integer, got {text:?}"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    Ok(n)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Fit { scene, targets, iterations } => {
            cmd_fit(cli, scene, targets, *iterations)
        }
        Command::Edit { iterations } => cmd_edit(cli, *iterations),
        Command::Render { scene, mode, beta, png } => {
            let scene = load_scene(scene)?;
            cmd_render(cli, &scene, blend_mode(*mode, *beta), *png, None)
        }
        Command::Animate { scene, driver, mode, beta, png } => {
            let scene = load_scene(scene)?;
            let driver = load_scene(driver)?;
            cmd_animate(cli, &scene, &driver, blend_mode(*mode, *beta), *png)
        }
        Command::Eval { scene, targets } => cmd_eval(cli, scene, targets),
        Command::Gradcheck { scene, beta, tolerance } => {
            cmd_gradcheck(cli, scene, *beta, *tolerance)
        }
        Command::MakeFixtures => cmd_make_fixtures(cli),
    }
}

fn blend_mode(mode: ModeArg, beta: f64) -> BlendMode {
    match mode {
        ModeArg::Standard => BlendMode::Standard,
        ModeArg::Wabe => BlendMode::Wabe { beta },
    }
}

/// Assembles the effective TrainConfig: defaults, then the config file,
/// then the --seed flag, then an --iterations override, then the scene's
/// cameras and timeline.
fn assemble_config(
    cli: &Cli,
    config_file: Option<&ConfigFile>,
    iterations: Option<u64>,
    scene: &LoadedScene,
) -> TrainConfig {
    let mut config = match config_file {
        Some(file) => file.apply(TrainConfig::default()),
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(iterations) = iterations {
        config.iterations = iterations;
    }
    config.cameras = scene.cameras.clone();
    config.timeline = scene.timeline.clone();
    config
}

fn load_cli_config(cli: &Cli) -> Result<Option<ConfigFile>> {
    cli.config.as_deref().map(ConfigFile::load).transpose()
}

fn read_target_grid(dir: &Path, views: usize, times: usize) -> Result<Vec<ImageBuffer>> {
    let mut targets = Vec::with_capacity(views * times);
    for view in 0..views {
        for time in 0..times {
            targets.push(read_ppm(&dir.join(grid_image_name(view, time, "ppm")))?);
        }
    }
    Ok(targets)
}

fn ensure_out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn write_metrics(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn training_metrics(outcome: &TrainOutcome, report: Option<&EvalReport>, wall: f64) -> String {
    let mut text = String::new();
    let last = outcome.metrics.last();
    let field = |m: Option<&StepMetrics>, f: fn(&StepMetrics) -> f64| {
        m.map_or(f64::NAN, f)
    };
    let _ = writeln!(text, "iterations: {}", outcome.metrics.len());
    let _ = writeln!(text, "wall_seconds: {wall:.3}");
    let _ = writeln!(text, "final_recon: {:.6}", field(last, |m| m.recon));
    let _ = writeln!(text, "final_binding: {:.6}", field(last, |m| m.binding));
    let _ = writeln!(text, "final_d_loss: {:.6}", field(last, |m| m.d_loss));
    let _ = writeln!(text, "final_g_loss: {:.6}", field(last, |m| m.g_loss));
    let _ = writeln!(text, "final_total: {:.6}", field(last, |m| m.total));
    if let Some(report) = report {
        text.push_str(&eval_metrics(report));
    }
    text
}

fn eval_metrics(report: &EvalReport) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "psnr_db: {:.4}", report.psnr);
    let _ = writeln!(text, "ssim: {:.6}", report.ssim);
    let _ = writeln!(text, "flicker_excess: {:.6e}", report.flicker_excess);
    let per_view: Vec<String> =
        report.per_view_psnr.iter().map(|p| format!("{p:.4}")).collect();
    let _ = writeln!(text, "per_view_psnr_db: {}", per_view.join(" "));
    text
}

fn cmd_fit(
    cli: &Cli,
    scene_path: &Path,
    targets_dir: &Path,
    iterations: Option<u64>,
) -> Result<(), Failure> {
    let scene = load_scene(scene_path)?;
    let config_file = load_cli_config(cli)?;
    let config = assemble_config(cli, config_file.as_ref(), iterations, &scene);
    let targets = read_target_grid(targets_dir, scene.cameras.len(), scene.timeline.len())?;

    let start = Instant::now();
    let outcome = fit_loop(scene.gaussians.clone(), &scene.rig, &config, &targets)?;
    let wall = start.elapsed().as_secs_f64();
    let report = evaluate(
        &outcome.gaussians,
        &scene.rig,
        &scene.cameras,
        &scene.timeline,
        &targets,
    )?;

    let out = ensure_out_dir(cli)?;
    write_scene(&scene.doc.with_gaussians(&outcome.gaussians), &out.join("final.json"))?;
    write_metrics(&out.join("metrics.txt"), &training_metrics(&outcome, Some(&report), wall))?;
    println!(
        "fit: {} iterations in {wall:.1}s, psnr {:.2} dB, ssim {:.4}",
        outcome.metrics.len(),
        report.psnr,
        report.ssim
    );
    Ok(())
}

fn cmd_edit(cli: &Cli, iterations: Option<u64>) -> Result<(), Failure> {
    let Some(config_path) = cli.config.as_deref() else {
        return Err(usage("edit requires --config"));
    };
    let config_file = ConfigFile::load(config_path)?;
    let Some(scene_path) = config_file.scene_path(config_path) else {
        return Err(usage(format!(
            "config {} must name a scene",
            config_path.display()
        )));
    };
    let scene = load_scene(&scene_path)?;
    let config = assemble_config(cli, Some(&config_file), iterations, &scene);

    let out = ensure_out_dir(cli)?.to_path_buf();
    let doc = scene.doc.clone();
    let mut checkpoint = |iteration: u64,
                          gaussians: &[Gaussian3D],
                          disc: &Discriminator|
     -> wabe_splat::Result<()> {
        let scene_path = out.join(format!("checkpoint_{iteration:06}.json"));
        write_scene(&doc.with_gaussians(gaussians), &scene_path)
            .map_err(|e| std::io::Error::other(format!("{e:#}")))?;
        let blob_path = out.join(format!("discriminator_{iteration:06}.bin"));
        fs::write(&blob_path, to_blob(disc))?;
        Ok(())
    };

    let start = Instant::now();
    let outcome = train_loop(
        scene.gaussians.clone(),
        &scene.rig,
        &config,
        Some(&mut checkpoint),
    )?;
    let wall = start.elapsed().as_secs_f64();

    write_scene(&scene.doc.with_gaussians(&outcome.gaussians), &out.join("final.json"))?;
    fs::write(out.join("discriminator_final.bin"), to_blob(&outcome.disc))
        .with_context(|| "writing discriminator_final.bin")?;
    write_metrics(&out.join("metrics.txt"), &training_metrics(&outcome, None, wall))?;
    println!(
        "edit: {} iterations in {wall:.1}s, final total loss {:.4}",
        outcome.metrics.len(),
        outcome.metrics.last().map_or(f64::NAN, |m| m.total)
    );
    Ok(())
}

fn render_grid(
    cli: &Cli,
    scene: &LoadedScene,
    timeline: &[TimelineFrame],
    mode: BlendMode,
    png: bool,
) -> Result<usize, Failure> {
    let out = ensure_out_dir(cli)?;
    for view in 0..scene.cameras.len() {
        for time in 0..timeline.len() {
            let forward = render_scene_frame(
                &scene.gaussians,
                &scene.rig,
                &scene.cameras,
                timeline,
                view,
                time,
                mode,
                false,
            )?;
            let image = &forward.output.image;
            write_ppm(image, &out.join(grid_image_name(view, time, "ppm")))?;
            if png {
                write_png(image, &out.join(grid_image_name(view, time, "png")))?;
            }
        }
    }
    Ok(scene.cameras.len() * timeline.len())
}

fn cmd_render(
    cli: &Cli,
    scene: &LoadedScene,
    mode: BlendMode,
    png: bool,
    timeline: Option<&[TimelineFrame]>,
) -> Result<(), Failure> {
    let timeline = timeline.unwrap_or(&scene.timeline);
    let count = render_grid(cli, scene, timeline, mode, png)?;
    println!("render: {count} images -> {}", cli.out.display());
    Ok(())
}

fn cmd_animate(
    cli: &Cli,
    scene: &LoadedScene,
    driver: &LoadedScene,
    mode: BlendMode,
    png: bool,
) -> Result<(), Failure> {
    for (i, frame) in driver.timeline.iter().enumerate() {
        if frame.weights.len() != scene.rig.blendshapes.len() {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "driver timeline[{i}] has {} expression weights; scene rig has {} blendshapes",
                frame.weights.len(),
                scene.rig.blendshapes.len()
            )));
        }
    }
    let count = render_grid(cli, scene, &driver.timeline, mode, png)?;
    println!(
        "animate: {count} images driven by {} timesteps -> {}",
        driver.timeline.len(),
        cli.out.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, scene_path: &Path, targets_dir: &Path) -> Result<(), Failure> {
    let scene = load_scene(scene_path)?;
    let targets = read_target_grid(targets_dir, scene.cameras.len(), scene.timeline.len())?;
    let report = evaluate(
        &scene.gaussians,
        &scene.rig,
        &scene.cameras,
        &scene.timeline,
        &targets,
    )?;
    let body = eval_metrics(&report);
    let out = ensure_out_dir(cli)?;
    write_metrics(&out.join("metrics.txt"), &body)?;
    print!("{body}");
    Ok(())
}

fn cmd_gradcheck(
    cli: &Cli,
    scene_path: &Path,
    beta: f64,
    tolerance: f64,
) -> Result<(), Failure> {
    let scene = load_scene(scene_path)?;
    let frames = scene_frames(&scene.rig, &scene.timeline, 0)?;
    let camera = &scene.cameras[0];
    // A random target keeps every pixel carrying loss signal; the probe
    // stream constant matches the library's probe recipe.
    let mut rng = stream_rng(cli.seed.unwrap_or(0), 0x7a6e7);
    let target = ImageBuffer::from_fn(camera.width, camera.height, |_, _| {
        use rand::Rng;
        nalgebra::Vector3::new(rng.gen(), rng.gen(), rng.gen())
    });

    let combos: [(&str, BlendMode, WPolicy); 3] = [
        ("standard", BlendMode::Standard, WPolicy::Detached),
        ("wabe-detached", BlendMode::Wabe { beta }, WPolicy::Detached),
        ("wabe-full", BlendMode::Wabe { beta }, WPolicy::Full),
    ];
    let mut worst: f64 = 0.0;
    for (name, mode, policy) in combos {
        let report = gradcheck(
            &scene.gaussians,
            &frames,
            camera,
            mode,
            &BackwardConfig { w_policy: policy },
            &target,
            &GradcheckSteps::default(),
        )?;
        println!(
            "gradcheck {name}: max rel error {:.3e} over {} parameter checks",
            report.max_rel_error, report.checked
        );
        worst = worst.max(report.max_rel_error);
    }
    if worst > tolerance {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "max relative error {worst:.3e} exceeds tolerance {tolerance:.1e}"
        )));
    }
    println!("gradcheck: ok (worst {worst:.3e} <= {tolerance:.1e})");
    Ok(())
}

fn cmd_make_fixtures(cli: &Cli) -> Result<(), Failure> {
    let out = ensure_out_dir(cli)?;
    let written = fixtures::write_all(out)?;
    for name in &written {
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}
