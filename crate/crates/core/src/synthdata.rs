//! Synthetic supervision: articulated chains and pulsating blobs, animated by
//! parameterized sinusoids, rendered to multi-view image/mask sequences with
//! exported ground-truth point trajectories.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::geom::{fps, SE3, UnitQuat, Vec3};
use crate::latent::{read_array_container, write_array_container};
use crate::render::{
    load_png_gray, load_png_rgb, splat_render, write_png_gray, write_png_rgb, Camera,
};

/// Objects are normalized so the farthest point sits at this radius; with the
/// orbit rig below (radius 2, fov 33.9 deg) anything larger leaves the frame.
pub const OBJECT_RADIUS: f64 = 0.5;

pub const RIG_ELEVATION_DEG: f64 = 15.0;
pub const RIG_RADIUS: f64 = 2.0;
pub const RIG_FOV_DEG: f64 = 33.9;

/// Opacity logit of the data-generation splats (sigmoid ~ 0.9975).
const POINT_OPACITY_LOGIT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Chain,
    Blob,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub kind: ObjectKind,
    pub segments: usize,
    pub points_per_segment: usize,
    pub segment_length: f64,
    pub jitter: f64,
    /// World-space size of the splats the points become when rendered.
    pub point_scale: f64,
}

impl SceneSpec {
    pub fn desk_chain() -> SceneSpec {
        SceneSpec { kind: ObjectKind::Chain, segments: 3, points_per_segment: 220, segment_length: 0.6, jitter: 0.07, point_scale: 0.018 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.points_per_segment == 0 {
            return Err(domain("scene spec counts must be >= 1"));
        }
        if !(self.segment_length > 0.0) || !(self.jitter >= 0.0) || !(self.point_scale > 0.0) {
            return Err(domain("scene spec lengths must be positive"));
        }
        Ok(())
    }
}

/// Canonical point cloud plus its articulation skeleton. Joint j sits between
/// segment j and j+1; rotating it moves every more-distal segment.
#[derive(Debug, Clone)]
pub struct Scene {
    pub kind: ObjectKind,
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub segment_of: Vec<usize>,
    pub joints: Vec<Vec3>,
    pub spec: SceneSpec,
    pub seed: u64,
}

const SEGMENT_PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.65, 0.90],
    [0.95, 0.80, 0.20],
    [0.35, 0.85, 0.35],
    [0.75, 0.35, 0.85],
    [0.90, 0.55, 0.20],
];

pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut segment_of = Vec::new();
    let mut joints = Vec::new();
    match spec.kind {
        ObjectKind::Chain => {
            // Segments stack along +y, centered about the origin afterwards.
            for s in 0..spec.segments {
                let y0 = s as f64 * spec.segment_length;
                for _ in 0..spec.points_per_segment {
                    let y = y0 + rng.gen_range(0.0..spec.segment_length);
                    let jx: f64 = StandardNormal.sample(&mut rng);
                    let jz: f64 = StandardNormal.sample(&mut rng);
                    points.push(Vec3::new(jx * spec.jitter, y, jz * spec.jitter));
                    colors.push(SEGMENT_PALETTE[s % SEGMENT_PALETTE.len()]);
                    segment_of.push(s);
                }
                if s + 1 < spec.segments {
                    joints.push(Vec3::new(0.0, (s + 1) as f64 * spec.segment_length, 0.0));
                }
            }
            let mid = spec.segments as f64 * spec.segment_length / 2.0;
            for p in &mut points {
                p.y -= mid;
            }
            for j in &mut joints {
                j.y -= mid;
            }
        }
        ObjectKind::Blob => {
            let total = spec.segments * spec.points_per_segment;
            for i in 0..total {
                let dir = loop {
                    let v = Vec3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    if v.norm() > 1e-6 {
                        break v.normalized();
                    }
                };
                points.push(dir);
                colors.push(SEGMENT_PALETTE[(i * SEGMENT_PALETTE.len()) / total]);
                segment_of.push(0);
            }
        }
    }
    // Normalize the farthest point onto the working radius.
    let max_norm = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let scale = OBJECT_RADIUS / max_norm;
    for p in &mut points {
        *p = p.scale(scale);
    }
    for j in &mut joints {
        *j = j.scale(scale);
    }
    Ok(Scene { kind: spec.kind, points, colors, segment_of, joints, spec: spec.clone(), seed })
}

/// angle(t) = amplitude * sin(2 pi frequency t); zero at t = 0 by design so
/// every motion shares the canonical frame-0 pose.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
}

impl Sinusoid {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * self.frequency * t).sin()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JointWave {
    pub axis: Vec3,
    pub waves: Vec<Sinusoid>,
}

impl JointWave {
    pub fn angle(&self, t: f64) -> f64 {
        self.waves.iter().map(|w| w.eval(t)).sum()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MotionSpec {
    pub joints: Vec<JointWave>,
    pub pulse: Option<Sinusoid>,
    pub frames: usize,
    pub tokens: Vec<String>,
    /// Coarse style label grouping related parameter settings.
    pub family: String,
}

/// Forward kinematics at normalized time t. Returns posed points and the
/// world transform of each segment (identity for blobs; pulsation is not
/// rigid and is tracked through the point trajectories instead).
pub fn animate(scene: &Scene, motion: &MotionSpec, t: f64) -> Result<(Vec<Vec3>, Vec<SE3>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("time {t} outside [0,1]")));
    }
    match scene.kind {
        ObjectKind::Chain => {
            if motion.joints.len() != scene.joints.len() {
                return Err(domain("motion joint count does not match scene"));
            }
            let segments = scene.spec.segments;
            let mut seg_tf = vec![SE3::IDENTITY; segments];
            for s in 1..segments {
                let j = s - 1;
                let angle = motion.joints[j].angle(t);
                let q = UnitQuat::from_axis_angle(motion.joints[j].axis, angle);
                // Rotation about the joint position, in already-posed space.
                let pivot = seg_tf[s - 1].apply(scene.joints[j]);
                let local = SE3::new(q, pivot.sub(q.rotate(pivot)));
                seg_tf[s] = local.compose(seg_tf[s - 1]);
            }
            let posed = scene
                .points
                .iter()
                .zip(&scene.segment_of)
                .map(|(&p, &s)| seg_tf[s].apply(p))
                .collect();
            Ok((posed, seg_tf))
        }
        ObjectKind::Blob => {
            let factor = 1.0 + motion.pulse.map_or(0.0, |p| p.eval(t));
            if factor <= 0.0 {
                return Err(domain("pulse amplitude collapses the blob"));
            }
            let posed = scene.points.iter().map(|p| p.scale(factor)).collect();
            Ok((posed, vec![SE3::IDENTITY; scene.spec.segments]))
        }
    }
}

/// Equally spaced azimuths at the shared elevation; the last camera is the
/// conventional held-out view.
pub fn orbit_rig(count: usize, resolution: (usize, usize)) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let az = 360.0 * i as f64 / count as f64;
            Camera::orbit(az, RIG_ELEVATION_DEG, RIG_RADIUS, RIG_FOV_DEG, resolution)
        })
        .collect()
}

/// Equally spaced orbit reordered so the first `train` cameras cover the
/// whole circle and every held-out camera sits between two training
/// azimuths. A contiguous training arc leaves the far side of the object
/// unconstrained (out-of-plane motion fits the training views but mirrors
/// on the opposite side); interleaving removes that ambiguity.
pub fn interleaved_rig(count: usize, train: usize, resolution: (usize, usize)) -> Result<Vec<Camera>> {
    if train == 0 || train > count {
        return Err(domain("interleaved_rig: train view count out of range"));
    }
    if count % train != 0 {
        return Err(domain("interleaved_rig: train view count must divide the total"));
    }
    let all = orbit_rig(count, resolution);
    let stride = count / train;
    let mut order: Vec<usize> = (0..count).filter(|i| i % stride == 0).collect();
    order.extend((0..count).filter(|i| i % stride != 0));
    Ok(order.into_iter().map(|i| all[i]).collect())
}

const STYLES: [&str; 4] = ["wave", "bend", "twist", "sway"];

fn style_spec(style: &str, speed_fast: bool, joint_count: usize, frames: usize) -> MotionSpec {
    let freq = if speed_fast { 2.0 } else { 1.0 };
    let x = Vec3::new(1.0, 0.0, 0.0);
    let y = Vec3::new(0.0, 1.0, 0.0);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let wave = |axis: Vec3, amp: f64| JointWave { axis, waves: vec![Sinusoid { amplitude: amp, frequency: freq }] };
    let joints: Vec<JointWave> = match style {
        "wave" => (0..joint_count).map(|_| wave(z, 0.55)).collect(),
        "bend" => (0..joint_count)
            .map(|j| if j == 0 { wave(x, 0.75) } else { wave(x, 0.0) })
            .collect(),
        "twist" => (0..joint_count).map(|_| wave(y, 0.8)).collect(),
        "sway" => (0..joint_count)
            .map(|j| wave(z, if j % 2 == 0 { 0.4 } else { -0.4 }))
            .collect(),
        other => panic!("unknown style {other}"),
    };
    let mut spec = MotionSpec { joints, pulse: None, frames, tokens: Vec::new(), family: style.to_string() };
    spec.tokens = prompt_tokens(&spec);
    spec
}

/// Deterministic rule-generated prompt: style label plus coarse speed and
/// amplitude buckets read back off the parameters.
pub fn prompt_tokens(spec: &MotionSpec) -> Vec<String> {
    let max_amp = spec
        .joints
        .iter()
        .flat_map(|j| j.waves.iter().map(|w| w.amplitude.abs()))
        .fold(0.0, f64::max);
    let max_freq = spec
        .joints
        .iter()
        .flat_map(|j| j.waves.iter().map(|w| w.frequency))
        .fold(0.0, f64::max);
    vec![
        spec.family.clone(),
        if max_freq > 1.5 { "fast" } else { "slow" }.to_string(),
        if max_amp > 0.6 { "large" } else { "small" }.to_string(),
    ]
}

/// The desk corpus: every style at both speeds (8 motions, 4 families).
pub fn desk_motion_specs(joint_count: usize, frames: usize) -> Vec<MotionSpec> {
    let mut out = Vec::new();
    for style in STYLES {
        for fast in [false, true] {
            out.push(style_spec(style, fast, joint_count, frames));
        }
    }
    out
}

/// A motion whose parameters sit strictly inside the convex hull of the desk
/// corpus: the convex combination of the two trained waves (4/5 slow wave,
/// 1/5 fast wave), i.e. a superposition of both sinusoids.
pub fn held_out_motion_spec(joint_count: usize, frames: usize) -> MotionSpec {
    let z = Vec3::new(0.0, 0.0, 1.0);
    let joints = (0..joint_count)
        .map(|_| JointWave {
            axis: z,
            waves: vec![
                Sinusoid { amplitude: 0.55 * 0.8, frequency: 1.0 },
                Sinusoid { amplitude: 0.55 * 0.2, frequency: 2.0 },
            ],
        })
        .collect();
    let mut spec =
        MotionSpec { joints, pulse: None, frames, tokens: Vec::new(), family: "wave".to_string() };
    spec.tokens = prompt_tokens(&spec);
    spec
}

/// Evaluation prompts built only from tokens seen in training, labelled with
/// the family they should land in.
pub fn held_out_prompts() -> Vec<(Vec<String>, String)> {
    let mut out = Vec::new();
    for style in STYLES {
        out.push((vec![style.to_string()], style.to_string()));
        out.push((vec![style.to_string(), "slow".to_string()], style.to_string()));
    }
    out.push((vec!["wave".to_string(), "fast".to_string()], "wave".to_string()));
    out.push((vec!["bend".to_string(), "large".to_string()], "bend".to_string()));
    out
}

/// Multi-view multi-motion supervision. Frames are indexed
/// `(m * view_count + v) * frame_count + t`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub motion_count: usize,
    pub view_count: usize,
    /// The first `train_views` cameras supervise training; the rest are held out.
    pub train_views: usize,
    pub frame_count: usize,
    pub cameras: Vec<Camera>,
    pub rgb: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
    /// [motion][frame][sample] ground-truth positions of seeded points.
    pub gt: Vec<Vec<Vec<Vec3>>>,
    pub prompts: Vec<Vec<String>>,
    pub families: Vec<String>,
    pub seed: u64,
}

impl Dataset {
    pub fn frame_index(&self, m: usize, v: usize, t: usize) -> usize {
        (m * self.view_count + v) * self.frame_count + t
    }

    /// Diagonal of the axis-aligned box enclosing all ground-truth points.
    pub fn gt_bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for per_motion in &self.gt {
            for frame in per_motion {
                for p in frame {
                    lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
                    hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
                }
            }
        }
        hi.sub(lo).norm()
    }
}

fn quantize(v: f64) -> f64 {
    ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0
}

/// Number of ground-truth sample points tracked per motion.
pub const GT_SAMPLES: usize = 64;

#[allow(clippy::too_many_arguments)]
pub fn render_dataset(
    scene: &Scene,
    motions: &[MotionSpec],
    cameras: &[Camera],
    train_views: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Dataset> {
    if cameras.is_empty() || motions.is_empty() {
        return Err(domain("render_dataset: need at least one camera and motion"));
    }
    if train_views == 0 || train_views > cameras.len() {
        return Err(domain("render_dataset: train view count out of range"));
    }
    let frame_count = motions[0].frames;
    if frame_count < 2 || motions.iter().any(|m| m.frames != frame_count) {
        return Err(domain("render_dataset: motions must share a frame count >= 2"));
    }
    let (width, height) = (cameras[0].width, cameras[0].height);
    std::fs::create_dir_all(out_dir.join("frames"))?;

    let n = scene.points.len();
    let centers_flat = |pts: &[Vec3]| -> Vec<f64> { pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect() };
    let log_scales = vec![scene.spec.point_scale.ln(); n * 3];
    let logits = vec![POINT_OPACITY_LOGIT; n];
    let colors: Vec<f64> = scene.colors.iter().flatten().copied().collect();
    let samples = fps(&scene.points, GT_SAMPLES.min(n), 0)?;

    let timestamps: Vec<f64> = (0..frame_count).map(|t| t as f64 / (frame_count - 1) as f64).collect();
    let mut rgb = Vec::new();
    let mut masks = Vec::new();
    let mut gt = Vec::new();
    for (m, motion) in motions.iter().enumerate() {
        let mut gt_m = Vec::new();
        let mut posed_frames = Vec::new();
        for &ts in &timestamps {
            let (posed, _) = animate(scene, motion, ts)?;
            gt_m.push(samples.iter().map(|&i| posed[i]).collect::<Vec<_>>());
            posed_frames.push(posed);
        }
        gt.push(gt_m);
        for (v, cam) in cameras.iter().enumerate() {
            for (t, posed) in posed_frames.iter().enumerate() {
                let out = splat_render(cam, &centers_flat(posed), &log_scales, &logits, &colors);
                let q_rgb: Vec<f64> = out.rgb.iter().map(|&v| quantize(v)).collect();
                let mask: Vec<f64> = out.alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect();
                write_png_rgb(&out_dir.join(format!("frames/m{m:02}_v{v}_t{t:03}.png")), &q_rgb, width, height)?;
                write_png_gray(&out_dir.join(format!("frames/m{m:02}_v{v}_t{t:03}_mask.png")), &mask, width, height)?;
                rgb.push(q_rgb);
                masks.push(mask);
            }
        }
    }

    let gt_arrays: Vec<(String, Vec<f64>)> = gt
        .iter()
        .enumerate()
        .map(|(m, per_motion)| {
            let data = per_motion
                .iter()
                .flat_map(|frame| frame.iter().flat_map(|p| [p.x, p.y, p.z]))
                .collect();
            (format!("gt_m{m:02}"), data)
        })
        .collect();
    let arrays: Vec<(&str, usize, usize, &[f64])> = gt_arrays
        .iter()
        .map(|(name, data)| (name.as_str(), frame_count * samples.len(), 3, data.as_slice()))
        .collect();
    write_array_container(
        &out_dir.join("trajectories.bin"),
        serde_json::json!({"samples": samples.len(), "frames": frame_count}),
        &arrays,
    )?;

    let manifest = serde_json::json!({
        "version": 1,
        "seed": seed,
        "resolution": [width, height],
        "motion_count": motions.len(),
        "view_count": cameras.len(),
        "train_views": train_views,
        "frame_count": frame_count,
        "rig": {
            "elevation_deg": RIG_ELEVATION_DEG,
            "radius": RIG_RADIUS,
            "fov_y_deg": RIG_FOV_DEG,
            // Recover each camera's azimuth from its pose and snap it onto
            // the equal-spacing grid, so reordered rigs reload exactly and
            // Camera::orbit reconstructs bit-identical poses.
            "azimuths_deg": cameras
                .iter()
                .map(|cam| {
                    let c = cam.pose.inverse().apply(Vec3::ZERO);
                    let az = c.x.atan2(c.z).to_degrees().rem_euclid(360.0);
                    let k = (az * cameras.len() as f64 / 360.0).round() as usize % cameras.len();
                    360.0 * k as f64 / cameras.len() as f64
                })
                .collect::<Vec<f64>>(),
        },
        "scene": scene.spec,
        "scene_seed": scene.seed,
        "prompts": motions.iter().map(|m| m.tokens.clone()).collect::<Vec<_>>(),
        "families": motions.iter().map(|m| m.family.clone()).collect::<Vec<_>>(),
        "gt_samples": samples.len(),
        "frame_pattern": "frames/m{motion:02}_v{view}_t{frame:03}.png",
    });
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    Ok(Dataset {
        width,
        height,
        motion_count: motions.len(),
        view_count: cameras.len(),
        train_views,
        frame_count,
        cameras: cameras.to_vec(),
        rgb,
        masks,
        timestamps,
        gt,
        prompts: motions.iter().map(|m| m.tokens.clone()).collect(),
        families: motions.iter().map(|m| m.family.clone()).collect(),
        seed,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let get = |k: &str| -> Result<u64> {
        manifest[k].as_u64().ok_or_else(|| Error::Format(format!("manifest missing {k}")))
    };
    let width = manifest["resolution"][0]
        .as_u64()
        .ok_or_else(|| Error::Format("manifest missing resolution".into()))? as usize;
    let height = manifest["resolution"][1].as_u64().unwrap_or(0) as usize;
    let motion_count = get("motion_count")? as usize;
    let view_count = get("view_count")? as usize;
    let train_views = get("train_views")? as usize;
    let frame_count = get("frame_count")? as usize;
    let seed = get("seed")?;

    let rig = &manifest["rig"];
    let cameras: Vec<Camera> = rig["azimuths_deg"]
        .as_array()
        .ok_or_else(|| Error::Format("manifest missing rig azimuths".into()))?
        .iter()
        .map(|az| {
            Camera::orbit(
                az.as_f64().unwrap_or(0.0),
                rig["elevation_deg"].as_f64().unwrap_or(RIG_ELEVATION_DEG),
                rig["radius"].as_f64().unwrap_or(RIG_RADIUS),
                rig["fov_y_deg"].as_f64().unwrap_or(RIG_FOV_DEG),
                (width, height),
            )
        })
        .collect();

    let mut rgb = Vec::new();
    let mut masks = Vec::new();
    for m in 0..motion_count {
        for v in 0..view_count {
            for t in 0..frame_count {
                let (img, w, h) = load_png_rgb(&dir.join(format!("frames/m{m:02}_v{v}_t{t:03}.png")))?;
                if w != width || h != height {
                    return Err(Error::Format("frame resolution mismatch".into()));
                }
                let (mask, _, _) = load_png_gray(&dir.join(format!("frames/m{m:02}_v{v}_t{t:03}_mask.png")))?;
                rgb.push(img);
                masks.push(mask);
            }
        }
    }

    let container = read_array_container(&dir.join("trajectories.bin"))?;
    let samples = container.meta["samples"].as_u64().unwrap_or(0) as usize;
    let mut gt = Vec::new();
    for m in 0..motion_count {
        let t = &container.arrays[&format!("gt_m{m:02}")];
        let mut per_motion = Vec::new();
        for f in 0..frame_count {
            per_motion.push(
                (0..samples)
                    .map(|s| {
                        let r = f * samples + s;
                        Vec3::new(t.at(r, 0), t.at(r, 1), t.at(r, 2))
                    })
                    .collect(),
            );
        }
        gt.push(per_motion);
    }

    let prompts = manifest["prompts"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|p| {
                    p.as_array()
                        .map(|t| t.iter().filter_map(|s| s.as_str().map(String::from)).collect())
                        .unwrap_or_default()
                })
                .collect()
        })
        .unwrap_or_default();
    let families = manifest["families"]
        .as_array()
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default();

    Ok(Dataset {
        width,
        height,
        motion_count,
        view_count,
        train_views,
        frame_count,
        cameras,
        rgb,
        masks,
        timestamps: (0..frame_count).map(|t| t as f64 / (frame_count - 1) as f64).collect(),
        gt,
        prompts,
        families,
        seed,
    })
}
