//! Command-line entry point: dataset generation, training, sampling,
//! interpolation, reconstruction and evaluation.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or usage error,
//! 3 numeric divergence, 4 corrupt artifact.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{domain, Error, Result};
use crate::latent::interpolate_latents;
use crate::render::{write_png_gray, write_png_rgb, Camera};
use crate::synthdata::{
    desk_motion_specs, gen_scene, held_out_motion_spec, held_out_prompts, interleaved_rig,
    load_dataset,
    render_dataset, SceneSpec, RIG_ELEVATION_DEG, RIG_FOV_DEG, RIG_RADIUS,
};
use crate::train::{
    self, diversity_proxy, evaluate, load_checkpoint, mask_iou, nearest_family,
    reconstruct_latent, render_frame, sample_motions, ModelState, TrainConfig,
};

#[derive(Parser)]
#[command(name = "motion4d", version, about = "Latent keypoint motion fields over splatted Gaussians")]
#[command(after_help = "Environment:\n  MOTION4D_THREADS  render worker threads (default: all cores); \
results are\n                    bitwise identical for any value")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-view dataset (plus a held-out clip).
    GenData(GenDataArgs),
    /// Run the two-stage optimization on a generated dataset.
    Train(TrainArgs),
    /// Decode motions from prior samples; no optimization happens here.
    Sample(SampleArgs),
    /// Decode along the line between two training latents.
    Interpolate(InterpolateArgs),
    /// Fit a fresh latent to an unseen clip with the model frozen.
    Reconstruct(ReconstructArgs),
    /// Held-out-view metrics, tracking error, diversity and prompt accuracy.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset to start from.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML file overlaying the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set weights.w_rgb=0.8. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => return Err(domain(format!("unknown preset {other:?} (expected desk or paper)"))),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            let table: toml::Value =
                toml::from_str(&text).map_err(|e| domain(format!("config file: {e}")))?;
            let overlay = serde_json::to_value(table)?;
            let mut base = serde_json::to_value(&cfg)?;
            merge_json(&mut base, &overlay)?;
            cfg = serde_json::from_value(base).map_err(|e| domain(format!("config file: {e}")))?;
        }
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| domain(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(key, value)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Overlay `patch` onto `base`; unknown keys are rejected so typos in a
/// config file fail loudly instead of silently doing nothing.
fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) -> Result<()> {
    let patch_obj = patch
        .as_object()
        .ok_or_else(|| domain("config file must be a table of settings"))?;
    let base_obj = base.as_object_mut().expect("config serializes to an object");
    for (k, v) in patch_obj {
        let slot = base_obj
            .get_mut(k)
            .ok_or_else(|| domain(format!("unknown config key {k}")))?;
        if slot.is_object() && v.is_object() {
            merge_json(slot, v)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    views: usize,
    /// First N views supervise training; the rest are held out.
    #[arg(long, default_value_t = 3)]
    train_views: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    motion_a: usize,
    #[arg(long)]
    motion_b: usize,
    /// Number of interpolation points including both endpoints.
    #[arg(long, default_value_t = 11)]
    steps: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single-motion clip directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prior samples for the diversity score.
    #[arg(long, default_value_t = 16)]
    samples: usize,
}

pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes, anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Domain(_) => 2,
                Error::Numeric(_) => 3,
                Error::Format(_) => 4,
                Error::Io(_) => 1,
            }
        }
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.train_views == 0 || args.train_views > args.views {
        return Err(domain("train_views must be in [1, views]"));
    }
    let spec = SceneSpec::desk_chain();
    let scene = gen_scene(&spec, args.seed)?;
    let cameras = interleaved_rig(args.views, args.train_views, (args.resolution, args.resolution))?;
    let motions = desk_motion_specs(scene.joints.len(), args.frames);
    let dataset = render_dataset(&scene, &motions, &cameras, args.train_views, &args.out, args.seed)?;
    println!(
        "dataset: {} motions x {} views x {} frames at {}x{} -> {}",
        dataset.motion_count, dataset.view_count, dataset.frame_count,
        dataset.width, dataset.height, args.out.display()
    );

    // The held-out clip shares the scene and rig but uses an unseen motion.
    let held_out = held_out_motion_spec(scene.joints.len(), args.frames);
    let held_dir = args.out.join("held_out");
    render_dataset(&scene, &[held_out], &cameras, args.train_views, &held_dir, args.seed)?;
    println!("held-out clip -> {}", held_dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let state = match &args.resume {
        Some(ckpt) => train::resume(&dataset, ckpt, &args.out)?,
        None => {
            let config = args.config.resolve()?;
            train::train(&dataset, &config, &args.out)?
        }
    };
    println!(
        "trained to step {} (stage {}), checkpoint -> {}",
        state.step,
        state.stage,
        train::checkpoint_path(&args.out).display()
    );
    Ok(())
}

fn turntable_camera(frame: usize, frames: usize, resolution: usize) -> Camera {
    let az = 360.0 * frame as f64 / frames as f64;
    Camera::orbit(az, RIG_ELEVATION_DEG, RIG_RADIUS, RIG_FOV_DEG, (resolution, resolution))
}

fn write_trajectory_container(path: &Path, meta: serde_json::Value, paths: &[Vec<crate::geom::Vec3>]) -> Result<()> {
    // One array per keypoint path, frames as rows.
    let flats: Vec<Vec<f64>> = paths
        .iter()
        .map(|p| p.iter().flat_map(|v| [v.x, v.y, v.z]).collect())
        .collect();
    let names: Vec<String> = (0..paths.len()).map(|k| format!("path_{k:03}")).collect();
    let arrays: Vec<(&str, usize, usize, &[f64])> = names
        .iter()
        .zip(&flats)
        .map(|(n, f)| (n.as_str(), f.len() / 3, 3, f.as_slice()))
        .collect();
    crate::latent::write_array_container(path, meta, &arrays)
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    // `sample_motions` and `render_frame` take the state immutably: this
    // command cannot optimize anything by construction.
    let state: &ModelState = &state;
    let samples = sample_motions(state, args.count, args.frames, args.seed)?;
    for (i, s) in samples.iter().enumerate() {
        let dir = args.out.join(format!("sample_{i:02}"));
        std::fs::create_dir_all(&dir)?;
        for (t, transforms) in s.transforms.iter().enumerate() {
            let cam = turntable_camera(t, s.transforms.len(), args.resolution);
            let out = render_frame(state, transforms, &cam)?;
            write_png_rgb(&dir.join(format!("t{t:03}.png")), &out.rgb, out.width, out.height)?;
        }
        write_trajectory_container(
            &dir.join("trajectories.bin"),
            serde_json::json!({"kind": "sampled-motion", "z": s.z, "frames": args.frames}),
            &s.paths,
        )?;
    }
    let sets: Vec<_> = samples.iter().map(|s| s.paths.clone()).collect();
    let diversity = if samples.len() >= 2 { diversity_proxy(&sets)? } else { 0.0 };
    let summary = serde_json::json!({"count": args.count, "seed": args.seed, "diversity": diversity});
    std::fs::write(args.out.join("samples.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{} samples -> {} (diversity {diversity:.6})", args.count, args.out.display());
    Ok(())
}

fn cmd_interpolate(args: &InterpolateArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    if args.steps < 2 {
        return Err(domain("interpolation needs at least the two endpoints"));
    }
    let m = state.store.get("latent.mu").rows;
    if args.motion_a >= m || args.motion_b >= m {
        return Err(domain(format!("motion index out of range (have {m})")));
    }
    std::fs::create_dir_all(&args.out)?;
    let mu_a = state.latent_mu(args.motion_a);
    let mu_b = state.latent_mu(args.motion_b);
    let keypoints = state.keypoints()?;
    let frames = state.frame_count.max(2);
    let timestamps: Vec<f64> = (0..frames).map(|t| t as f64 / (frames - 1) as f64).collect();
    for i in 0..args.steps {
        let alpha = i as f64 / (args.steps - 1) as f64;
        let z = interpolate_latents(&mu_a, &mu_b, alpha)?;
        let transforms = train::decode_trajectory(&state, &z, &timestamps)?;
        let paths = train::keypoint_paths(&keypoints, &transforms);
        write_trajectory_container(
            &args.out.join(format!("alpha_{i:02}.bin")),
            serde_json::json!({"kind": "interpolated-motion", "alpha": alpha, "z": z,
                               "motion_a": args.motion_a, "motion_b": args.motion_b}),
            &paths,
        )?;
    }
    println!("{} interpolation points -> {}", args.steps, args.out.display());
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let clip = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let z = reconstruct_latent(&state, &clip, args.steps)?;

    // Score the fit on the clip's held-out views (all views if none).
    let views: Vec<usize> = if clip.train_views < clip.view_count {
        (clip.train_views..clip.view_count).collect()
    } else {
        (0..clip.view_count).collect()
    };
    let transforms = train::decode_trajectory(&state, &z, &clip.timestamps)?;
    let mut iou_acc = 0.0;
    let mut n = 0usize;
    for t in 0..clip.frame_count {
        for &v in &views {
            let out = render_frame(&state, &transforms[t], &clip.cameras[v])?;
            iou_acc += mask_iou(&out.alpha, &clip.masks[clip.frame_index(0, v, t)]);
            n += 1;
        }
        if t == 0 {
            let out = render_frame(&state, &transforms[t], &clip.cameras[views[0]])?;
            write_png_rgb(&args.out.join("fit_t000.png"), &out.rgb, out.width, out.height)?;
            write_png_gray(&args.out.join("fit_t000_mask.png"), &out.alpha, out.width, out.height)?;
        }
    }
    let iou = iou_acc / n as f64;
    let report = serde_json::json!({"z": z, "steps": args.steps, "mask_iou": iou});
    std::fs::write(args.out.join("reconstruction.json"), serde_json::to_string_pretty(&report)?)?;
    println!("reconstructed latent with mask IoU {iou:.4} -> {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let report = evaluate(&state, &dataset)?;

    let samples = sample_motions(&state, args.samples, dataset.frame_count, state.config.seed)?;
    let sets: Vec<_> = samples.iter().map(|s| s.paths.clone()).collect();
    let diversity = if sets.len() >= 2 { diversity_proxy(&sets)? } else { 0.0 };

    let prompt_accuracy = match &state.projector {
        Some(proj) if state.cache.is_some() => {
            let prompts = held_out_prompts();
            let mut hits = 0usize;
            for (tokens, family) in &prompts {
                let z = proj.project(tokens)?;
                if &nearest_family(&state, &z, &dataset.families)? == family {
                    hits += 1;
                }
            }
            Some(hits as f64 / prompts.len() as f64)
        }
        _ => None,
    };

    let mut metrics = serde_json::to_value(&report)?;
    metrics["diversity"] = serde_json::json!(diversity);
    metrics["prompt_accuracy"] = serde_json::json!(prompt_accuracy);
    std::fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "psnr {:.2} iou {:.4} rmse {:.4} ({:.2}% of bbox) diversity {:.4} -> {}",
        report.mean_psnr,
        report.mean_iou,
        report.trajectory_rmse,
        100.0 * report.rmse_fraction,
        diversity,
        args.out.display()
    );
    Ok(())
}
