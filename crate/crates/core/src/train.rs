//! Two-stage optimization: keypoints are first rendered directly as Gaussian
//! blobs to learn per-motion latents and the shared transform decoder, then
//! canonical Gaussians are spawned around the keypoints and fine-tuned under
//! linear blend skinning against the frozen stage-one trajectories.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{AdamState, ParamStore, Tape, Tensor, Var};
use crate::error::{domain, Error, Result};
use crate::geom::{fps, trajectory_distance, UnitQuat, Vec3, SE3};
use crate::latent::{
    clamp_log_var, read_array_container, write_array_container, DecoderConfig, DecoderVars,
    MotionDecoder, PromptProjector,
};
use crate::loss::{
    arap_edge_weights, arap_loss_vars, chamfer_vars, kl_loss_vars, photometric_loss_vars,
    LossWeights,
};
use crate::motion::{
    build_motion_graph, densify_prune, lbs_deform, lbs_deform_vars, skinning_assignment,
    DensifyConfig, GaussianSet, KeyPointSet, LbsVars, MotionGraph, SkinningAssignment,
    TrajectoryCache,
};
use crate::render::{splat_render, RenderOutput, SplatOp};
use crate::synthdata::Dataset;

pub const CHECKPOINT_FORMAT: &str = "motion4d-checkpoint-v1";

/// Everything the optimizer needs to know up front. Serializable so a
/// checkpoint can be resumed without the original flags.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Target keypoint count N_k; annealing returns to it after densification.
    pub keypoints: usize,
    pub gaussians_per_keypoint: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    pub graph_degree: usize,
    pub batch_motions: usize,
    pub batch_views: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub lr_latent_mult: f64,
    pub weights: LossWeights,
    pub densify: DensifyConfig,
    pub densify_interval: usize,
    pub anneal_interval: usize,
    pub checkpoint_interval: usize,
    pub stage1_resolution: usize,
    /// Render resolutions stepped through evenly across stage two.
    pub stage2_resolutions: Vec<usize>,
    pub max_gaussians: usize,
    pub init_log_radius: f64,
    pub init_log_scale_kp: f64,
    pub init_log_scale_g: f64,
    pub init_opacity_kp: f64,
    pub init_opacity_g: f64,
    /// Frame strides sampled for the rigidity term.
    pub arap_dts: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Small preset sized for a CPU run of a few minutes.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            stage1_steps: 1500,
            stage2_steps: 3000,
            keypoints: 32,
            gaussians_per_keypoint: 64,
            latent_dim: 8,
            decoder_hidden: 64,
            decoder_depth: 8,
            graph_degree: 4,
            batch_motions: 4,
            batch_views: 3,
            batch_frames: 2,
            lr: 3e-3,
            lr_latent_mult: 3.0,
            weights: LossWeights::default(),
            densify: DensifyConfig::default(),
            densify_interval: 100,
            anneal_interval: 500,
            checkpoint_interval: 500,
            stage1_resolution: 32,
            stage2_resolutions: vec![32, 64],
            max_gaussians: 4096,
            init_log_radius: (0.015f64).ln(),
            init_log_scale_kp: (0.09f64).ln(),
            init_log_scale_g: (0.02f64).ln(),
            init_opacity_kp: 2.0,
            init_opacity_g: 0.0,
            arap_dts: vec![1, 2, 4],
            seed: 0,
        }
    }

    /// Full-size preset; the schedule shape matches the desk preset.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            stage1_steps: 5000,
            stage2_steps: 20000,
            keypoints: 64,
            gaussians_per_keypoint: 128,
            decoder_hidden: 128,
            stage2_resolutions: vec![64, 128, 256],
            max_gaussians: 65536,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 || self.keypoints < 2 || self.gaussians_per_keypoint == 0 {
            return Err(domain("config: steps, keypoints and gaussians must be positive"));
        }
        if self.batch_motions == 0 || self.batch_views == 0 || self.batch_frames == 0 {
            return Err(domain("config: batch sizes must be positive"));
        }
        if self.graph_degree == 0 || self.graph_degree >= self.keypoints {
            return Err(domain("config: graph degree must be in [1, keypoints)"));
        }
        if self.stage2_resolutions.is_empty() {
            return Err(domain("config: stage-two resolution schedule is empty"));
        }
        if !(self.lr > 0.0) || !(self.lr_latent_mult > 0.0) {
            return Err(domain("config: learning rates must be positive"));
        }
        if self.arap_dts.is_empty() || self.arap_dts.contains(&0) {
            return Err(domain("config: arap strides must be positive"));
        }
        self.weights.validate()
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            latent_dim: self.latent_dim,
            hidden: self.decoder_hidden,
            depth: self.decoder_depth,
            ..DecoderConfig::default()
        }
    }

    /// Sets one field by dotted path from its string form, e.g.
    /// `set("weights.w_rgb", "0.8")`. Unknown paths are errors.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let pointer = format!("/{}", path.replace('.', "/"));
        let slot = root
            .pointer_mut(&pointer)
            .ok_or_else(|| domain(format!("unknown config key {path}")))?;
        *slot = parse_config_value(slot, value, path)?;
        *self = serde_json::from_value(root)
            .map_err(|e| domain(format!("invalid value for {path}: {e}")))?;
        self.validate()
    }
}

fn parse_config_value(current: &serde_json::Value, s: &str, path: &str) -> Result<serde_json::Value> {
    use serde_json::Value;
    let err = || domain(format!("cannot parse {s:?} for config key {path}"));
    Ok(match current {
        Value::Number(n) if n.is_u64() => Value::from(s.parse::<u64>().map_err(|_| err())?),
        Value::Number(_) => Value::from(s.parse::<f64>().map_err(|_| err())?),
        Value::Bool(_) => Value::from(s.parse::<bool>().map_err(|_| err())?),
        Value::String(_) => Value::from(s.to_string()),
        Value::Array(_) => serde_json::from_str(s).map_err(|_| err())?,
        _ => return Err(err()),
    })
}

/// The trainable model plus the derived structures kept alongside it. The
/// parameter store is the single source of truth for all trainable arrays.
pub struct ModelState {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState,
    pub decoder: MotionDecoder,
    pub graph: MotionGraph,
    pub assignment: Option<SkinningAssignment>,
    pub cache: Option<TrajectoryCache>,
    /// Keypoint positions frozen with the cache at the end of stage one.
    pub cache_canonical: Vec<Vec3>,
    pub projector: Option<PromptProjector>,
    pub motion_count: usize,
    pub frame_count: usize,
    pub step: usize,
    pub stage: usize,
}

pub fn keypoints_from_store(store: &ParamStore) -> Result<KeyPointSet> {
    let p = store.get("kp.positions");
    let r = store.get("kp.log_radii");
    let positions = (0..p.rows).map(|i| row_vec3(&p.data, i)).collect();
    KeyPointSet::new(positions, r.data.clone())
}

/// Stage-aware Gaussian view of the store: stage one renders the keypoints
/// themselves, stage two the spawned set.
pub fn gaussians_from_store(store: &ParamStore, stage: usize) -> Result<GaussianSet> {
    let prefix = if stage >= 2 { "g" } else { "kp" };
    let centers_name = if stage >= 2 { "g.centers".to_string() } else { "kp.positions".to_string() };
    let c = store.get(&centers_name);
    let ls = store.get(&format!("{prefix}.log_scales"));
    let op = store.get(&format!("{prefix}.opacity_logits"));
    let col = store.get(&format!("{prefix}.color_logits"));
    let n = c.rows;
    GaussianSet::new(
        (0..n).map(|i| row_vec3(&c.data, i)).collect(),
        vec![UnitQuat::IDENTITY; n],
        (0..n).map(|i| row_vec3(&ls.data, i)).collect(),
        op.data.clone(),
        (0..n).map(|i| [col.data[i * 3], col.data[i * 3 + 1], col.data[i * 3 + 2]]).collect(),
    )
}

fn row_vec3(data: &[f64], i: usize) -> Vec3 {
    Vec3::new(data[i * 3], data[i * 3 + 1], data[i * 3 + 2])
}

fn flat3(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

impl ModelState {
    pub fn keypoints(&self) -> Result<KeyPointSet> {
        keypoints_from_store(&self.store)
    }

    pub fn gaussians(&self) -> Result<GaussianSet> {
        gaussians_from_store(&self.store, self.stage)
    }

    pub fn latent_mu(&self, m: usize) -> Vec<f64> {
        let g = self.store.get("latent.mu");
        g.data[m * g.cols..(m + 1) * g.cols].to_vec()
    }

    pub fn latent_log_var(&self, m: usize) -> Vec<f64> {
        let g = self.store.get("latent.log_var");
        g.data[m * g.cols..(m + 1) * g.cols].to_vec()
    }

    /// Decoder weights mirrored out of the store.
    pub fn synced_decoder(&self) -> MotionDecoder {
        let mut d = self.decoder.clone();
        d.read_from_store(&self.store);
        d
    }

    /// Structural invariants that must hold after every optimization event.
    pub fn check_integrity(&self) -> Result<()> {
        if !self.adam.consistent_with(&self.store) {
            return Err(domain("integrity: optimizer moments out of sync with parameters"));
        }
        let n_k = self.store.get("kp.positions").rows;
        if self.store.get("kp.log_radii").rows != n_k {
            return Err(domain("integrity: keypoint group row mismatch"));
        }
        if self.graph.edges.len() != n_k
            || self.graph.edges.iter().any(|e| e.iter().any(|&j| j >= n_k))
        {
            return Err(domain("integrity: graph references missing keypoints"));
        }
        if self.stage >= 2 {
            let n_g = self.store.get("g.centers").rows;
            for name in ["g.log_scales", "g.color_logits"] {
                if self.store.get(name).rows != n_g {
                    return Err(domain("integrity: gaussian group row mismatch"));
                }
            }
            if self.store.get("g.opacity_logits").rows != n_g {
                return Err(domain("integrity: gaussian group row mismatch"));
            }
            let a = self
                .assignment
                .as_ref()
                .ok_or_else(|| domain("integrity: stage two lacks a skinning assignment"))?;
            if a.drivers.len() != n_g || a.drivers.iter().any(|s| s.iter().any(|&k| k >= n_k)) {
                return Err(domain("integrity: skinning assignment out of range"));
            }
            let cache = self
                .cache
                .as_ref()
                .ok_or_else(|| domain("integrity: stage two lacks a trajectory cache"))?;
            if cache.keypoint_count() != n_k || self.cache_canonical.len() != n_k {
                return Err(domain("integrity: trajectory cache keypoint count mismatch"));
            }
        }
        for g in self.store.iter() {
            if !g.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("integrity: non-finite values in {}", g.name)));
            }
        }
        Ok(())
    }
}

/// Deterministic per-step stream so a resumed run draws the same numbers.
fn step_rng(seed: u64, stage: u64, step: u64) -> ChaCha8Rng {
    let mut x = seed ^ stage.wrapping_mul(0xA076_1D64_78BD_642F) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    ChaCha8Rng::seed_from_u64(x)
}

fn sample_without_replacement(count: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    let take = size.min(count);
    for i in 0..take {
        let j = rng.gen_range(i..count);
        idx.swap(i, j);
    }
    let mut out = idx[..take].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub motions: Vec<usize>,
    pub views: Vec<usize>,
    pub frames: Vec<usize>,
}

/// Independent without-replacement draws along each axis; the step uses the
/// full cross product of the three index lists.
pub fn sample_batch(
    counts: (usize, usize, usize),
    sizes: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let (m, v, t) = counts;
    if m == 0 || v == 0 || t == 0 {
        return Err(domain("sample_batch: empty axis"));
    }
    Ok(Batch {
        motions: sample_without_replacement(m, sizes.0, rng),
        views: sample_without_replacement(v, sizes.1, rng),
        frames: sample_without_replacement(t, sizes.2, rng),
    })
}

/// Box-filter downsample of interleaved row-major image data.
pub fn downsample_box(data: &[f64], w: usize, h: usize, ch: usize, factor: usize) -> Vec<f64> {
    if factor <= 1 {
        return data.to_vec();
    }
    let (ow, oh) = (w / factor, h / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; ow * oh * ch];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[((y * factor + dy) * w + (x * factor + dx)) * ch + c];
                    }
                }
                out[(y * ow + x) * ch + c] = acc * inv;
            }
        }
    }
    out
}

fn target_at(dataset: &Dataset, m: usize, v: usize, t: usize, res: usize) -> Result<(Tensor, Tensor)> {
    if dataset.width % res != 0 || dataset.width != dataset.height {
        return Err(domain(format!("render resolution {res} does not divide dataset {}", dataset.width)));
    }
    let factor = dataset.width / res;
    let idx = dataset.frame_index(m, v, t);
    let rgb = downsample_box(&dataset.rgb[idx], dataset.width, dataset.height, 3, factor);
    let mask = downsample_box(&dataset.masks[idx], dataset.width, dataset.height, 1, factor);
    Ok((Tensor::new(res * res, 3, rgb), Tensor::new(res * res, 1, mask)))
}

fn uniform_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let p = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if p.dot(p) <= 1.0 {
            return p.scale(radius);
        }
    }
}

/// Fresh model: keypoints uniform in the unit-object ball, zero-information
/// latents, identity decoder, canonical-space co-movement graph.
pub fn init_model(config: &TrainConfig, dataset: &Dataset) -> Result<ModelState> {
    config.validate()?;
    let mut rng = step_rng(config.seed, 0, 0);
    let n_k = config.keypoints;
    let centers: Vec<Vec3> = (0..n_k).map(|_| uniform_ball(&mut rng, crate::synthdata::OBJECT_RADIUS)).collect();

    let mut store = ParamStore::new();
    store.add("kp.positions", n_k, 3, flat3(&centers), 1.0);
    store.add("kp.log_radii", n_k, 1, vec![config.init_log_radius; n_k], 1.0);
    store.add("kp.log_scales", n_k, 3, vec![config.init_log_scale_kp; n_k * 3], 1.0);
    store.add("kp.opacity_logits", n_k, 1, vec![config.init_opacity_kp; n_k], 1.0);
    store.add("kp.color_logits", n_k, 3, vec![0.0; n_k * 3], 1.0);

    let m = dataset.motion_count;
    let d = config.latent_dim;
    let mu: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-0.01..0.01)).collect();
    store.add("latent.mu", m, d, mu, config.lr_latent_mult);
    store.add("latent.log_var", m, d, vec![0.0; m * d], config.lr_latent_mult);

    let decoder = MotionDecoder::new(config.decoder_config(), &mut rng);
    decoder.add_to_store(&mut store, 1.0);

    let keypoints = keypoints_from_store(&store)?;
    let graph = build_motion_graph(&keypoints, None, config.graph_degree)?;
    let adam = AdamState::new(&store, config.lr);
    Ok(ModelState {
        config: config.clone(),
        store,
        adam,
        decoder,
        graph,
        assignment: None,
        cache: None,
        cache_canonical: Vec::new(),
        projector: None,
        motion_count: m,
        frame_count: dataset.frame_count,
        step: 0,
        stage: 1,
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepStats {
    pub step: usize,
    pub stage: usize,
    pub resolution: usize,
    pub points: usize,
    pub total: f64,
    pub photometric: f64,
    pub arap: f64,
    pub kl: f64,
    pub chamfer: f64,
}

pub struct TrainLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl TrainLog {
    pub fn create(path: Option<&Path>) -> Result<TrainLog> {
        let file = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(TrainLog { file })
    }

    fn record(&mut self, stats: &StepStats) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, stats)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// One optimizer step; returns per-term values and leaves per-row positional
/// gradient norms of the rendered centers in `grad_accum`.
fn train_step(
    state: &mut ModelState,
    dataset: &Dataset,
    resolution: usize,
    rng: &mut ChaCha8Rng,
    grad_accum: &mut [f64],
) -> Result<StepStats> {
    let stage2 = state.stage >= 2;
    let cfg = &state.config;
    let store = &state.store;
    let mut tape = Tape::new();

    // One leaf per parameter group, in store order, so gradients map back 1:1.
    let leaves: Vec<Var> = store.iter().map(|g| tape.leaf(g.tensor())).collect();
    let at = |name: &str| -> Var {
        leaves[store.index_of(name).unwrap_or_else(|| panic!("missing group {name}"))]
    };
    let kp_pos = at("kp.positions");
    let kp_logr = at("kp.log_radii");
    let mu_all = at("latent.mu");
    let lv_all = at("latent.log_var");
    let dec_vars = DecoderVars {
        weights: (0..cfg.decoder_depth).map(|l| at(&MotionDecoder::weight_name(l))).collect(),
        biases: (0..cfg.decoder_depth).map(|l| at(&MotionDecoder::bias_name(l))).collect(),
    };
    let (centers_leaf, log_scales, opacity, color_logits) = if stage2 {
        (at("g.centers"), at("g.log_scales"), at("g.opacity_logits"), at("g.color_logits"))
    } else {
        (kp_pos, at("kp.log_scales"), at("kp.opacity_logits"), at("kp.color_logits"))
    };
    let colors = tape.sigmoid(color_logits);

    let batch = sample_batch(
        (dataset.motion_count, dataset.train_views, dataset.frame_count),
        (cfg.batch_motions, cfg.batch_views, cfg.batch_frames),
        rng,
    )?;

    let keypoints = state.keypoints()?;
    let edge_weights = arap_edge_weights(&keypoints, &state.graph)?;
    let drivers = state.assignment.as_ref().map(|a| a.drivers.clone());

    let mut photo_acc: Option<Var> = None;
    let mut arap_acc: Option<Var> = None;
    let mut chamfer_acc: Option<Var> = None;
    let mut renders = 0usize;
    let mut chamfers = 0usize;
    let push = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match *acc {
            None => v,
            Some(a) => tape.add(a, v),
        });
    };

    for &m in &batch.motions {
        let mu_m = tape.gather_rows(mu_all, &[m]);
        let lv_m = tape.gather_rows(lv_all, &[m]);
        let eps: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        let z = crate::latent::reparameterize_vars(&mut tape, mu_m, lv_m, &eps);

        for &t in &batch.frames {
            let (quats, trans) =
                state.decoder.decode_vars(&mut tape, &dec_vars, z, kp_pos, dataset.timestamps[t])?;
            let kp_def = tape.add(kp_pos, trans);
            let centers = if stage2 {
                let vars = LbsVars {
                    centers: centers_leaf,
                    keypoint_positions: kp_pos,
                    keypoint_log_radii: kp_logr,
                    rotations: quats,
                    translations: trans,
                };
                lbs_deform_vars(&mut tape, &vars, drivers.as_ref().unwrap())?
            } else {
                kp_def
            };
            for &v in &batch.views {
                let camera = dataset.cameras[v].with_resolution(resolution, resolution);
                let out = tape.custom(Box::new(SplatOp { camera }), &[centers, log_scales, opacity, colors]);
                let (t_rgb, t_mask) = target_at(dataset, m, v, t, resolution)?;
                let p = photometric_loss_vars(&mut tape, out, &t_rgb, &t_mask, &cfg.weights)?;
                push(&mut tape, &mut photo_acc, p);
                renders += 1;
            }
            if stage2 {
                // Pull decoded keypoints toward the frozen stage-one paths.
                let cache = state.cache.as_ref().unwrap();
                let target: Vec<Vec3> = (0..keypoints.len())
                    .map(|k| state.cache_canonical[k].add(cache.transforms[m][t][k].translation))
                    .collect();
                let c = chamfer_vars(&mut tape, kp_def, &target)?;
                push(&mut tape, &mut chamfer_acc, c);
                chamfers += 1;
            }
        }

        // Rigidity over one sampled frame pair per motion.
        let strides: Vec<usize> =
            cfg.arap_dts.iter().copied().filter(|&d| d < dataset.frame_count).collect();
        if !strides.is_empty() {
            let dt = strides[rng.gen_range(0..strides.len())];
            let t0 = rng.gen_range(0..dataset.frame_count - dt);
            let frame_at = |tape: &mut Tape, t: usize| -> Result<Var> {
                let (_, tr) =
                    state.decoder.decode_vars(tape, &dec_vars, z, kp_pos, dataset.timestamps[t])?;
                Ok(tape.add(kp_pos, tr))
            };
            let f0 = frame_at(&mut tape, t0)?;
            let f1 = frame_at(&mut tape, t0 + dt)?;
            let a = arap_loss_vars(&mut tape, &[f0, f1], &state.graph, &edge_weights, 1)?;
            push(&mut tape, &mut arap_acc, a);
        }
    }

    let photo = tape.scale(photo_acc.unwrap(), 1.0 / renders as f64);
    let kl_raw = kl_loss_vars(&mut tape, mu_all, lv_all);
    let kl = tape.scale(kl_raw, cfg.weights.w_kl / dataset.motion_count as f64);
    let mut total = tape.add(photo, kl);
    let arap_val;
    match arap_acc {
        Some(a) => {
            let scaled = tape.scale(
                a,
                cfg.weights.w_arap / (batch.motions.len() * keypoints.len()) as f64,
            );
            arap_val = tape.value(scaled).data[0];
            total = tape.add(total, scaled);
        }
        None => arap_val = 0.0,
    }
    let chamfer_val;
    match chamfer_acc {
        Some(c) => {
            let scaled = tape.scale(c, cfg.weights.w_chamfer / chamfers as f64);
            chamfer_val = tape.value(scaled).data[0];
            total = tape.add(total, scaled);
        }
        None => chamfer_val = 0.0,
    }

    let total_val = tape.value(total).data[0];
    if !total_val.is_finite() {
        return Err(Error::Numeric(format!("loss diverged at step {}", state.step)));
    }
    let stats = StepStats {
        step: state.step,
        stage: state.stage,
        resolution,
        points: tape.value(centers_leaf).rows,
        total: total_val,
        photometric: tape.value(photo).data[0],
        arap: arap_val,
        kl: tape.value(kl).data[0],
        chamfer: chamfer_val,
    };

    let grads = tape.backward(total)?;
    let store_grads: Vec<Option<Tensor>> =
        leaves.iter().map(|v| grads[v.0].clone()).collect();

    // Positional gradient pressure on the rendered centers drives cloning.
    if let Some(g) = &store_grads[state.store.index_of(if stage2 { "g.centers" } else { "kp.positions" }).unwrap()] {
        for (i, slot) in grad_accum.iter_mut().enumerate() {
            let r = g.row(i);
            *slot += (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        }
    }

    state.adam.step(&mut state.store, &store_grads)?;
    let lv = state.store.get_mut("latent.log_var");
    for v in lv.data.iter_mut() {
        *v = clamp_log_var(*v);
    }
    Ok(stats)
}

/// Clone/prune the rendered point set in place, keeping every parallel store
/// group, the optimizer moments, and (stage two) the skinning assignment
/// aligned with the surviving rows.
fn densify_event(state: &mut ModelState, grad_stats: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
    let stage2 = state.stage >= 2;
    let mut set = gaussians_from_store(&state.store, state.stage)?;
    let at_cap = stage2 && set.len() >= state.config.max_gaussians;
    let stats: Vec<f64> = if at_cap { vec![0.0; set.len()] } else { grad_stats.to_vec() };
    let mut dcfg = state.config.densify;
    dcfg.min_count = if stage2 {
        (state.config.keypoints * state.config.gaussians_per_keypoint / 2).max(1)
    } else {
        state.config.keypoints
    };
    let mapping = densify_prune(&mut set, &stats, &dcfg, rng)?;

    let groups: &[&str] = if stage2 {
        &["g.centers", "g.log_scales", "g.opacity_logits", "g.color_logits"]
    } else {
        &["kp.positions", "kp.log_radii", "kp.log_scales", "kp.opacity_logits", "kp.color_logits"]
    };
    for name in groups {
        let idx = state.store.index_of(name).unwrap();
        let cols = state.store.group(idx).cols;
        state.store.reindex_rows(name, &mapping)?;
        state.adam.reindex_rows(idx, cols, &mapping);
    }
    // Clones carry a jitter the plain reindex above cannot see.
    let centers_name = if stage2 { "g.centers" } else { "kp.positions" };
    state.store.get_mut(centers_name).data = flat3(&set.centers);

    if stage2 {
        let keypoints = state.keypoints()?;
        let gaussians = gaussians_from_store(&state.store, 2)?;
        state.assignment = Some(skinning_assignment(&gaussians, &keypoints, &state.graph)?);
    } else {
        state.graph = build_motion_graph(&state.keypoints()?, None, state.config.graph_degree)?;
    }
    state.check_integrity()
}

/// Farthest-point anneal of the keypoint set back to the configured count.
fn anneal_event(state: &mut ModelState, rng: &mut ChaCha8Rng) -> Result<()> {
    let n_k = state.config.keypoints;
    let keypoints = state.keypoints()?;
    if keypoints.len() > n_k {
        let mapping = fps(&keypoints.positions, n_k, 0)?;
        for name in ["kp.positions", "kp.log_radii", "kp.log_scales", "kp.opacity_logits", "kp.color_logits"] {
            let idx = state.store.index_of(name).unwrap();
            let cols = state.store.group(idx).cols;
            state.store.reindex_rows(name, &mapping)?;
            state.adam.reindex_rows(idx, cols, &mapping);
        }
    } else if keypoints.len() < n_k {
        // Pad by cloning random survivors with a small offset.
        let cur = keypoints.len();
        let mut mapping: Vec<usize> = (0..cur).collect();
        mapping.extend((cur..n_k).map(|_| rng.gen_range(0..cur)));
        for name in ["kp.positions", "kp.log_radii", "kp.log_scales", "kp.opacity_logits", "kp.color_logits"] {
            let idx = state.store.index_of(name).unwrap();
            let cols = state.store.group(idx).cols;
            state.store.reindex_rows(name, &mapping)?;
            state.adam.reindex_rows(idx, cols, &mapping);
        }
        let jitter = 0.01;
        let data = &mut state.store.get_mut("kp.positions").data;
        for i in cur..n_k {
            for c in 0..3 {
                data[i * 3 + c] += rng.gen_range(-jitter..=jitter);
            }
        }
    }
    state.graph = build_motion_graph(&state.keypoints()?, None, state.config.graph_degree)?;
    state.check_integrity()
}

/// Decode every motion at every frame with its mean latent. The result is the
/// frozen target ("the cache") for stage two.
pub fn build_trajectory_cache(state: &ModelState, dataset: &Dataset) -> Result<TrajectoryCache> {
    let decoder = state.synced_decoder();
    let keypoints = state.keypoints()?;
    let mut transforms = Vec::with_capacity(dataset.motion_count);
    for m in 0..dataset.motion_count {
        let z = state.latent_mu(m);
        let mut per_frame = Vec::with_capacity(dataset.frame_count);
        for &ts in &dataset.timestamps {
            per_frame.push(decoder.decode_motion(&z, &keypoints, ts)?);
        }
        transforms.push(per_frame);
    }
    TrajectoryCache::new(transforms)
}

/// Stage transition: freeze the trajectory cache, rebuild the graph from
/// trajectory distances, spawn Gaussians around each keypoint, and restart
/// the optimizer over the enlarged parameter set.
fn begin_stage2(state: &mut ModelState, dataset: &Dataset) -> Result<()> {
    let mut rng = step_rng(state.config.seed, 2, 0);
    anneal_event(state, &mut rng)?;
    let cache = build_trajectory_cache(state, dataset)?;
    let keypoints = state.keypoints()?;
    state.cache_canonical = keypoints.positions.clone();
    state.graph = build_motion_graph(&keypoints, Some(&cache), state.config.graph_degree)?;
    state.cache = Some(cache);

    // Stage-one render attributes retire; Gaussians get their own.
    let cfg = &state.config;
    let n_g = keypoints.len() * cfg.gaussians_per_keypoint;
    let mut centers = Vec::with_capacity(n_g);
    for (k, p) in keypoints.positions.iter().enumerate() {
        // log_radii parameterize the squared RBF scale; spawn within one sigma.
        let sigma = (0.5 * keypoints.log_radii[k]).exp();
        for _ in 0..cfg.gaussians_per_keypoint {
            centers.push(p.add(uniform_ball(&mut rng, sigma)));
        }
    }

    let mut store = ParamStore::new();
    for name in ["kp.positions", "kp.log_radii", "latent.mu", "latent.log_var"] {
        let g = state.store.get(name);
        store.add(name, g.rows, g.cols, g.data.clone(), g.lr_mult);
    }
    for l in 0..cfg.decoder_depth {
        for name in [MotionDecoder::weight_name(l), MotionDecoder::bias_name(l)] {
            let g = state.store.get(&name);
            store.add(&name, g.rows, g.cols, g.data.clone(), g.lr_mult);
        }
    }
    store.add("g.centers", n_g, 3, flat3(&centers), 1.0);
    store.add("g.log_scales", n_g, 3, vec![cfg.init_log_scale_g; n_g * 3], 1.0);
    store.add("g.opacity_logits", n_g, 1, vec![cfg.init_opacity_g; n_g], 1.0);
    store.add("g.color_logits", n_g, 3, vec![0.0; n_g * 3], 1.0);

    state.adam = AdamState::new(&store, state.config.lr);
    state.store = store;
    state.stage = 2;

    let gaussians = gaussians_from_store(&state.store, 2)?;
    state.assignment = Some(skinning_assignment(&gaussians, &state.keypoints()?, &state.graph)?);
    state.check_integrity()
}

fn stage2_resolution(config: &TrainConfig, step_in_stage: usize) -> usize {
    let n = config.stage2_resolutions.len();
    let i = (step_in_stage * n) / config.stage2_steps.max(1);
    config.stage2_resolutions[i.min(n - 1)]
}

fn run_stage(
    state: &mut ModelState,
    dataset: &Dataset,
    log: &mut TrainLog,
    out_dir: &Path,
    stage_end: usize,
) -> Result<()> {
    let stage2 = state.stage >= 2;
    let cfg = state.config.clone();
    let mut grad_accum = vec![0.0f64; state.store.get(if stage2 { "g.centers" } else { "kp.positions" }).rows];
    let mut accum_steps = 0usize;
    while state.step < stage_end {
        let resolution = if stage2 {
            stage2_resolution(&cfg, state.step - cfg.stage1_steps)
        } else {
            cfg.stage1_resolution
        };
        let mut rng = step_rng(cfg.seed, state.stage as u64, state.step as u64);
        let stats = match train_step(state, dataset, resolution, &mut rng, &mut grad_accum) {
            Ok(s) => s,
            Err(Error::Numeric(msg)) => {
                // Leave a post-mortem checkpoint behind before bailing out.
                let _ = save_checkpoint(state, &out_dir.join("diverged.ckpt"));
                let _ = log.flush();
                return Err(Error::Numeric(msg));
            }
            Err(e) => return Err(e),
        };
        log.record(&stats)?;
        accum_steps += 1;
        state.step += 1;
        let done = state.step - (if stage2 { cfg.stage1_steps } else { 0 });

        if done % cfg.densify_interval == 0 && state.step < stage_end {
            let mean: Vec<f64> = grad_accum.iter().map(|g| g / accum_steps as f64).collect();
            densify_event(state, &mean, &mut rng)?;
            grad_accum = vec![0.0; state.store.get(if stage2 { "g.centers" } else { "kp.positions" }).rows];
            accum_steps = 0;
        }
        if !stage2 && done % cfg.anneal_interval == 0 && state.step < stage_end {
            anneal_event(state, &mut rng)?;
            grad_accum = vec![0.0; state.store.get("kp.positions").rows];
            accum_steps = 0;
        }
        if done % cfg.checkpoint_interval == 0 {
            save_checkpoint(state, &out_dir.join("checkpoint.ckpt"))?;
            log.flush()?;
        }
    }
    log.flush()
}

/// Full pipeline: stage one, stage transition, stage two, prompt head.
/// Writes `checkpoint.ckpt` and `train_log.jsonl` under `out_dir`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<ModelState> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut state = init_model(config, dataset)?;
    let mut log = TrainLog::create(Some(&out_dir.join("train_log.jsonl")))?;
    run_stage(&mut state, dataset, &mut log, out_dir, config.stage1_steps)?;
    begin_stage2(&mut state, dataset)?;
    run_stage(&mut state, dataset, &mut log, out_dir, config.stage1_steps + config.stage2_steps)?;
    finish_training(&mut state, dataset, out_dir)?;
    Ok(state)
}

/// The cached trajectories that guided stage two are stale by the end of the
/// run (latents and decoder kept moving); re-decode them with the final
/// model so downstream consumers see current trajectories, then fit the
/// prompt head and save.
fn finish_training(state: &mut ModelState, dataset: &Dataset, out_dir: &Path) -> Result<()> {
    let cache = build_trajectory_cache(state, dataset)?;
    state.cache_canonical = state.keypoints()?.positions.clone();
    state.cache = Some(cache);
    train_projector(state, &dataset.prompts, 400)?;
    save_checkpoint(state, &out_dir.join("checkpoint.ckpt"))
}

/// Continue a checkpointed run to the configured total step count.
pub fn resume(dataset: &Dataset, checkpoint: &Path, out_dir: &Path) -> Result<ModelState> {
    let mut state = load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let cfg = state.config.clone();
    let mut log = TrainLog::create(Some(&out_dir.join("train_log.jsonl")))?;
    if state.stage == 1 {
        run_stage(&mut state, dataset, &mut log, out_dir, cfg.stage1_steps)?;
        begin_stage2(&mut state, dataset)?;
    }
    run_stage(&mut state, dataset, &mut log, out_dir, cfg.stage1_steps + cfg.stage2_steps)?;
    finish_training(&mut state, dataset, out_dir)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Inference-side helpers. These take &ModelState: nothing here can update a
// parameter, which is the structural guarantee that sampling never optimizes.
// ---------------------------------------------------------------------------

/// Render one frame of a motion given per-keypoint transforms.
pub fn render_frame(state: &ModelState, transforms: &[SE3], camera: &crate::render::Camera) -> Result<RenderOutput> {
    let keypoints = state.keypoints()?;
    let set = state.gaussians()?;
    let centers: Vec<Vec3> = if state.stage >= 2 {
        let assignment = state
            .assignment
            .as_ref()
            .ok_or_else(|| domain("render: stage two lacks a skinning assignment"))?;
        lbs_deform(&set, &keypoints, assignment, transforms)?.0
    } else {
        keypoints
            .positions
            .iter()
            .zip(transforms)
            .map(|(p, tr)| p.add(tr.translation))
            .collect()
    };
    let log_scales: Vec<f64> = set.log_scales.iter().flat_map(|s| [s.x, s.y, s.z]).collect();
    let colors: Vec<f64> = set
        .colors
        .iter()
        .flat_map(|c| c.map(|l| 1.0 / (1.0 + (-l).exp())))
        .collect();
    Ok(splat_render(camera, &flat3(&centers), &log_scales, &set.opacity_logits, &colors))
}

/// Per-keypoint transforms for latent `z` at every timestamp.
pub fn decode_trajectory(state: &ModelState, z: &[f64], timestamps: &[f64]) -> Result<Vec<Vec<SE3>>> {
    let decoder = state.synced_decoder();
    let keypoints = state.keypoints()?;
    timestamps.iter().map(|&t| decoder.decode_motion(z, &keypoints, t)).collect()
}

/// Keypoint paths ([keypoint][frame]) induced by per-frame transforms.
pub fn keypoint_paths(keypoints: &KeyPointSet, transforms: &[Vec<SE3>]) -> Vec<Vec<Vec3>> {
    (0..keypoints.len())
        .map(|k| {
            transforms
                .iter()
                .map(|frame| keypoints.positions[k].add(frame[k].translation))
                .collect()
        })
        .collect()
}

/// Mean over keypoints of the per-trajectory distance.
pub fn trajectory_set_distance(a: &[Vec<Vec3>], b: &[Vec<Vec3>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(domain("trajectory set size mismatch"));
    }
    let mut acc = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        acc += trajectory_distance(pa, pb)?;
    }
    Ok(acc / a.len() as f64)
}

/// Mean pairwise trajectory-set distance; zero iff all sets coincide.
pub fn diversity_proxy(sets: &[Vec<Vec<Vec3>>]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(domain("diversity needs at least two samples"));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            acc += trajectory_set_distance(&sets[i], &sets[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

#[derive(Debug, Clone)]
pub struct SampledMotion {
    pub z: Vec<f64>,
    /// [frame][keypoint] transforms.
    pub transforms: Vec<Vec<SE3>>,
    /// [keypoint][frame] positions.
    pub paths: Vec<Vec<Vec3>>,
}

/// Draw latents from the standard normal prior and decode them. Pure
/// feed-forward: the state is immutable here.
pub fn sample_motions(state: &ModelState, count: usize, frames: usize, seed: u64) -> Result<Vec<SampledMotion>> {
    if count == 0 || frames < 2 {
        return Err(domain("sampling needs count >= 1 and frames >= 2"));
    }
    let keypoints = state.keypoints()?;
    let timestamps: Vec<f64> = (0..frames).map(|t| t as f64 / (frames - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z: Vec<f64> = (0..state.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let transforms = decode_trajectory(state, &z, &timestamps)?;
        let paths = keypoint_paths(&keypoints, &transforms);
        out.push(SampledMotion { z, transforms, paths });
    }
    Ok(out)
}

/// Index of the training motion whose cached trajectories sit closest to the
/// decoded trajectory of `z`.
pub fn nearest_cached_motion(state: &ModelState, z: &[f64]) -> Result<usize> {
    let cache = state.cache.as_ref().ok_or_else(|| domain("no trajectory cache available"))?;
    let keypoints = state.keypoints()?;
    let t_count = cache.transforms[0].len();
    let timestamps: Vec<f64> = (0..t_count).map(|t| t as f64 / (t_count - 1) as f64).collect();
    let paths = keypoint_paths(&keypoints, &decode_trajectory(state, z, &timestamps)?);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for m in 0..cache.motion_count {
        let cached: Vec<Vec<Vec3>> = (0..keypoints.len())
            .map(|k| cache.keypoint_path(m, k, state.cache_canonical[k]))
            .collect();
        let d = trajectory_set_distance(&paths, &cached)?;
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    Ok(best)
}

/// Mean cached keypoint paths per motion family.
pub fn family_mean_paths(state: &ModelState, families: &[String]) -> Result<Vec<(String, Vec<Vec<Vec3>>)>> {
    let cache = state.cache.as_ref().ok_or_else(|| domain("no trajectory cache available"))?;
    if families.len() != cache.motion_count {
        return Err(domain("one family label per cached motion required"));
    }
    let keypoints = state.keypoints()?;
    let mut names: Vec<String> = Vec::new();
    for f in families {
        if !names.contains(f) {
            names.push(f.clone());
        }
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let members: Vec<usize> =
            (0..cache.motion_count).filter(|&m| families[m] == name).collect();
        let inv = 1.0 / members.len() as f64;
        let mean: Vec<Vec<Vec3>> = (0..keypoints.len())
            .map(|k| {
                let mut acc = vec![Vec3::ZERO; cache.frame_count];
                for &m in &members {
                    for (t, p) in cache.keypoint_path(m, k, state.cache_canonical[k]).iter().enumerate() {
                        acc[t] = acc[t].add(p.scale(inv));
                    }
                }
                acc
            })
            .collect();
        out.push((name, mean));
    }
    Ok(out)
}

/// Family whose mean cached trajectory is nearest to the decoded motion of `z`.
pub fn nearest_family(state: &ModelState, z: &[f64], families: &[String]) -> Result<String> {
    let cache = state.cache.as_ref().ok_or_else(|| domain("no trajectory cache available"))?;
    let keypoints = state.keypoints()?;
    let t_count = cache.frame_count;
    let timestamps: Vec<f64> = (0..t_count).map(|t| t as f64 / (t_count - 1) as f64).collect();
    let paths = keypoint_paths(&keypoints, &decode_trajectory(state, z, &timestamps)?);
    let mut best = String::new();
    let mut best_d = f64::INFINITY;
    for (name, mean) in family_mean_paths(state, families)? {
        let d = trajectory_set_distance(&paths, &mean)?;
        if d < best_d {
            best_d = d;
            best = name;
        }
    }
    Ok(best)
}

/// Fit a fresh latent to an unseen clip by gradient descent on the
/// photometric loss alone; the model itself stays frozen. Zero steps returns
/// the prior mean (the zero vector).
pub fn reconstruct_latent(state: &ModelState, clip: &Dataset, steps: usize) -> Result<Vec<f64>> {
    if clip.motion_count != 1 {
        return Err(domain("reconstruction expects a single-motion clip"));
    }
    let d = state.config.latent_dim;
    let mut store = ParamStore::new();
    store.add("z", 1, d, vec![0.0; d], 1.0);
    let mut adam = AdamState::new(&store, state.config.lr * state.config.lr_latent_mult);

    let keypoints = state.keypoints()?;
    let set = state.gaussians()?;
    let kp_flat = flat3(&keypoints.positions);
    let ls_flat: Vec<f64> = set.log_scales.iter().flat_map(|s| [s.x, s.y, s.z]).collect();
    let col_flat: Vec<f64> = set.colors.iter().flat_map(|c| c).copied().collect();
    let drivers = state.assignment.as_ref().map(|a| a.drivers.clone());

    for step in 0..steps {
        let mut rng = step_rng(state.config.seed, 3, step as u64);
        let batch = sample_batch(
            (1, clip.train_views, clip.frame_count),
            (1, 2, 2),
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let z = tape.leaf(store.get("z").tensor());
        let dec_vars = state.synced_decoder().vars_from_self(&mut tape);
        let kp_pos = tape.constant(Tensor::new(keypoints.len(), 3, kp_flat.clone()));
        let kp_logr = tape.constant(Tensor::new(keypoints.len(), 1, keypoints.log_radii.clone()));
        let centers_c = tape.constant(Tensor::new(set.len(), 3, flat3(&set.centers)));
        let log_scales = tape.constant(Tensor::new(set.len(), 3, ls_flat.clone()));
        let opacity = tape.constant(Tensor::new(set.len(), 1, set.opacity_logits.clone()));
        let col_logits = tape.constant(Tensor::new(set.len(), 3, col_flat.clone()));
        let colors = tape.sigmoid(col_logits);

        let mut acc: Option<Var> = None;
        let mut renders = 0;
        for &t in &batch.frames {
            let (quats, trans) =
                state.decoder.decode_vars(&mut tape, &dec_vars, z, kp_pos, clip.timestamps[t])?;
            let centers = if state.stage >= 2 {
                let vars = LbsVars {
                    centers: centers_c,
                    keypoint_positions: kp_pos,
                    keypoint_log_radii: kp_logr,
                    rotations: quats,
                    translations: trans,
                };
                lbs_deform_vars(&mut tape, &vars, drivers.as_ref().unwrap())?
            } else {
                tape.add(kp_pos, trans)
            };
            for &v in &batch.views {
                let out = tape.custom(
                    Box::new(SplatOp { camera: clip.cameras[v] }),
                    &[centers, log_scales, opacity, colors],
                );
                let (t_rgb, t_mask) = target_at(clip, 0, v, t, clip.width)?;
                let p = photometric_loss_vars(&mut tape, out, &t_rgb, &t_mask, &state.config.weights)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => tape.add(a, p),
                });
                renders += 1;
            }
        }
        let total = tape.scale(acc.unwrap(), 1.0 / renders as f64);
        if !tape.value(total).data[0].is_finite() {
            return Err(Error::Numeric(format!("reconstruction diverged at step {step}")));
        }
        let grads = tape.backward(total)?;
        adam.step(&mut store, &[grads[z.0].clone()])?;
    }
    Ok(store.get("z").data.clone())
}

/// Fit the prompt head to map pooled token embeddings onto the learned
/// latent means. Decoder and latents stay frozen.
pub fn train_projector(state: &mut ModelState, prompts: &[Vec<String>], steps: usize) -> Result<()> {
    if prompts.len() != state.motion_count {
        return Err(domain("one prompt per motion required"));
    }
    let d = state.config.latent_dim;
    let mut proj = PromptProjector::new(d, 64, 32, 64, state.config.seed);
    let mu = state.store.get("latent.mu").tensor();

    // Besides the full prompts, train on every leading-token subset so that
    // shorter prompts built from seen tokens pool to familiar inputs. Subsets
    // shared by several motions pull toward their latent mean under MSE.
    let mut pooled = Vec::new();
    let mut targets = Vec::new();
    for (m, tokens) in prompts.iter().enumerate() {
        let mut subsets: Vec<Vec<String>> = vec![Vec::new()];
        for (i, tok) in tokens.iter().enumerate() {
            let mut extended = Vec::new();
            for sub in &subsets {
                let mut with = sub.clone();
                with.push(tok.clone());
                extended.push(with);
            }
            if i == 0 {
                // The first token names the family; every subset keeps it.
                subsets = extended;
            } else {
                subsets.extend(extended);
            }
        }
        for sub in subsets {
            pooled.extend(proj.pool(&sub)?);
            targets.extend_from_slice(mu.row(m));
        }
    }
    let rows = targets.len() / d;
    let mu = Tensor::new(rows, d, targets);
    let m = rows;

    let mut store = ParamStore::new();
    store.add("w1", proj.w1.rows, proj.w1.cols, proj.w1.data.clone(), 1.0);
    store.add("b1", proj.b1.rows, proj.b1.cols, proj.b1.data.clone(), 1.0);
    store.add("w2", proj.w2.rows, proj.w2.cols, proj.w2.data.clone(), 1.0);
    store.add("b2", proj.b2.rows, proj.b2.cols, proj.b2.data.clone(), 1.0);
    let mut adam = AdamState::new(&store, 1e-2);

    for step in 0..steps {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = store.iter().map(|g| tape.leaf(g.tensor())).collect();
        let x = tape.constant(Tensor::new(m, proj.embed_dim, pooled.clone()));
        let out = proj.head_vars(&mut tape, x, leaves[0], leaves[1], leaves[2], leaves[3]);
        let target = tape.constant(mu.clone());
        let diff = tape.sub(out, target);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        if !tape.value(loss).data[0].is_finite() {
            return Err(Error::Numeric(format!("projector training diverged at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let store_grads: Vec<Option<Tensor>> = leaves.iter().map(|v| grads[v.0].clone()).collect();
        adam.step(&mut store, &store_grads)?;
    }
    proj.w1 = store.get("w1").tensor();
    proj.b1 = store.get("b1").tensor();
    proj.w2 = store.get("w2").tensor();
    proj.b2 = store.get("b2").tensor();
    state.projector = Some(proj);
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation metrics.
// ---------------------------------------------------------------------------

pub const PSNR_CAP: f64 = 60.0;

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn mask_iou(alpha: &[f64], mask: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &m) in alpha.iter().zip(mask) {
        let pa = a > 0.5;
        let pm = m > 0.5;
        inter += (pa && pm) as usize;
        union += (pa || pm) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MotionEval {
    pub motion: usize,
    pub psnr: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub per_motion: Vec<MotionEval>,
    pub mean_psnr: f64,
    pub mean_iou: f64,
    pub trajectory_rmse: f64,
    pub bbox_diagonal: f64,
    pub rmse_fraction: f64,
}

/// Held-out-view reconstruction metrics plus tracking error against the
/// seeded ground-truth points. Tracking compares displacements: each seeded
/// point is matched to the keypoint nearest to it in the canonical frame and
/// the RMSE of the displacement difference over all frames is reported.
pub fn evaluate(state: &ModelState, dataset: &Dataset) -> Result<EvalReport> {
    let views: Vec<usize> = if dataset.train_views < dataset.view_count {
        (dataset.train_views..dataset.view_count).collect()
    } else {
        (0..dataset.view_count).collect()
    };
    let keypoints = state.keypoints()?;
    let mut per_motion = Vec::new();
    let mut rmse_acc = 0.0;
    let mut rmse_n = 0usize;
    for m in 0..dataset.motion_count {
        let z = state.latent_mu(m);
        let transforms = decode_trajectory(state, &z, &dataset.timestamps)?;
        let mut psnr_acc = 0.0;
        let mut iou_acc = 0.0;
        let mut n = 0usize;
        for t in 0..dataset.frame_count {
            for &v in &views {
                let out = render_frame(state, &transforms[t], &dataset.cameras[v])?;
                let idx = dataset.frame_index(m, v, t);
                psnr_acc += psnr(&out.rgb, &dataset.rgb[idx]);
                iou_acc += mask_iou(&out.alpha, &dataset.masks[idx]);
                n += 1;
            }
        }
        per_motion.push(MotionEval { motion: m, psnr: psnr_acc / n as f64, iou: iou_acc / n as f64 });

        // Ground truth frame 0 is the canonical pose, so nearest-at-rest
        // matching is well defined.
        let paths = keypoint_paths(&keypoints, &transforms);
        for s in 0..dataset.gt[m][0].len() {
            let p0 = dataset.gt[m][0][s];
            let mut k_best = 0;
            let mut d_best = f64::INFINITY;
            for (k, p) in keypoints.positions.iter().enumerate() {
                let d = p0.dist_sq(*p);
                if d < d_best {
                    d_best = d;
                    k_best = k;
                }
            }
            let mut acc = 0.0;
            for t in 0..dataset.frame_count {
                let gt_disp = dataset.gt[m][t][s].sub(p0);
                let kp_disp = paths[k_best][t].sub(paths[k_best][0]);
                let e = gt_disp.sub(kp_disp);
                acc += e.dot(e);
            }
            rmse_acc += acc / dataset.frame_count as f64;
            rmse_n += 1;
        }
    }
    let mean_psnr = per_motion.iter().map(|e| e.psnr).sum::<f64>() / per_motion.len() as f64;
    let mean_iou = per_motion.iter().map(|e| e.iou).sum::<f64>() / per_motion.len() as f64;
    let trajectory_rmse = (rmse_acc / rmse_n as f64).sqrt();
    let bbox_diagonal = dataset.gt_bbox_diagonal();
    Ok(EvalReport {
        per_motion,
        mean_psnr,
        mean_iou,
        trajectory_rmse,
        bbox_diagonal,
        rmse_fraction: trajectory_rmse / bbox_diagonal,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let groups: Vec<serde_json::Value> = state
        .store
        .iter()
        .map(|g| serde_json::json!({"name": g.name, "lr_mult": g.lr_mult, "trainable": g.trainable}))
        .collect();
    let mut meta = serde_json::json!({
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "stage": state.stage,
        "motion_count": state.motion_count,
        "frame_count": state.frame_count,
        "config": serde_json::to_value(&state.config)?,
        "graph": state.graph.edges,
        "graph_degree": state.graph.degree,
        "groups": groups,
        "adam_step": state.adam.step,
    });

    let mut arrays: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    for (i, g) in state.store.iter().enumerate() {
        arrays.push((g.name.clone(), g.rows, g.cols, g.data.clone()));
        let (m1, m2) = state.adam.moments(i);
        arrays.push((format!("adam.m.{}", g.name), g.rows, g.cols, m1.to_vec()));
        arrays.push((format!("adam.v.{}", g.name), g.rows, g.cols, m2.to_vec()));
    }
    if let Some(cache) = &state.cache {
        let (m, t, k) = (cache.motion_count, cache.frame_count, cache.keypoint_count());
        meta["cache_dims"] = serde_json::json!([m, t, k]);
        let mut flat = Vec::with_capacity(m * t * k * 7);
        for per_motion in &cache.transforms {
            for frame in per_motion {
                for se3 in frame {
                    let q = se3.rotation;
                    flat.extend([q.w, q.x, q.y, q.z, se3.translation.x, se3.translation.y, se3.translation.z]);
                }
            }
        }
        arrays.push(("cache.transforms".into(), m * t * k, 7, flat));
        arrays.push(("cache.canonical".into(), k, 3, flat3(&state.cache_canonical)));
    }
    if let Some(p) = &state.projector {
        meta["projector"] = serde_json::json!({
            "embed_dim": p.embed_dim, "hidden": p.hidden, "vocab_size": p.vocab_size, "seed": p.seed,
        });
        arrays.push(("proj.w1".into(), p.w1.rows, p.w1.cols, p.w1.data.clone()));
        arrays.push(("proj.b1".into(), p.b1.rows, p.b1.cols, p.b1.data.clone()));
        arrays.push(("proj.w2".into(), p.w2.rows, p.w2.cols, p.w2.data.clone()));
        arrays.push(("proj.b2".into(), p.b2.rows, p.b2.cols, p.b2.data.clone()));
    }
    let refs: Vec<(&str, usize, usize, &[f64])> =
        arrays.iter().map(|(n, r, c, d)| (n.as_str(), *r, *c, d.as_slice())).collect();
    write_array_container(path, meta, &refs)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let container = read_array_container(path)?;
    let meta = &container.meta;
    if meta["format"].as_str() != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
    }
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let step = meta["step"].as_u64().ok_or_else(|| Error::Format("checkpoint lacks step".into()))? as usize;
    let stage = meta["stage"].as_u64().ok_or_else(|| Error::Format("checkpoint lacks stage".into()))? as usize;
    let motion_count = meta["motion_count"].as_u64().unwrap_or(0) as usize;
    let frame_count = meta["frame_count"].as_u64().unwrap_or(0) as usize;

    let mut store = ParamStore::new();
    let groups = meta["groups"].as_array().ok_or_else(|| Error::Format("checkpoint lacks groups".into()))?;
    for g in groups {
        let name = g["name"].as_str().ok_or_else(|| Error::Format("group lacks name".into()))?;
        let lr_mult = g["lr_mult"].as_f64().unwrap_or(1.0);
        let t = container
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array {name}")))?;
        let idx = store.add(name, t.rows, t.cols, t.data.clone(), lr_mult);
        store.group_mut(idx).trainable = g["trainable"].as_bool().unwrap_or(true);
    }
    let mut adam = AdamState::new(&store, config.lr);
    adam.step = meta["adam_step"].as_u64().unwrap_or(0);
    for (i, name) in store.iter().map(|g| g.name.clone()).enumerate().collect::<Vec<_>>() {
        let m1 = container.arrays.get(&format!("adam.m.{name}"));
        let m2 = container.arrays.get(&format!("adam.v.{name}"));
        if let (Some(m1), Some(m2)) = (m1, m2) {
            adam.set_moments(i, m1.data.clone(), m2.data.clone());
        }
    }

    let mut decoder = MotionDecoder::new(config.decoder_config(), &mut ChaCha8Rng::seed_from_u64(0));
    decoder.read_from_store(&store);

    let edges: Vec<Vec<usize>> = serde_json::from_value(meta["graph"].clone())
        .map_err(|e| Error::Format(format!("checkpoint graph: {e}")))?;
    let degree = meta["graph_degree"].as_u64().unwrap_or(config.graph_degree as u64) as usize;
    let graph = MotionGraph { edges, degree };

    let (cache, cache_canonical) = match meta.get("cache_dims") {
        Some(dims) => {
            let d: Vec<usize> = serde_json::from_value(dims.clone())
                .map_err(|e| Error::Format(format!("checkpoint cache dims: {e}")))?;
            let [m, t, k] = d[..] else {
                return Err(Error::Format("checkpoint cache dims must be [M, T, K]".into()));
            };
            let flat = container
                .arrays
                .get("cache.transforms")
                .ok_or_else(|| Error::Format("checkpoint missing cached trajectories".into()))?;
            if flat.rows != m * t * k || flat.cols != 7 {
                return Err(Error::Format("cached trajectory shape mismatch".into()));
            }
            let mut transforms = Vec::with_capacity(m);
            let mut row = 0usize;
            for _ in 0..m {
                let mut per_frame = Vec::with_capacity(t);
                for _ in 0..t {
                    let mut frame = Vec::with_capacity(k);
                    for _ in 0..k {
                        let r = flat.row(row);
                        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
                        if !(n.is_finite() && (n - 1.0).abs() < 1e-3 && r[0] >= 0.0) {
                            return Err(Error::Format("cached rotation is degenerate".into()));
                        }
                        // Stored normalized; renormalizing here would make a
                        // save/load/save cycle drift byte-wise.
                        let q = UnitQuat { w: r[0], x: r[1], y: r[2], z: r[3] };
                        frame.push(SE3::new(q, Vec3::new(r[4], r[5], r[6])));
                        row += 1;
                    }
                    per_frame.push(frame);
                }
                transforms.push(per_frame);
            }
            let canon = container
                .arrays
                .get("cache.canonical")
                .ok_or_else(|| Error::Format("checkpoint missing cached canonical points".into()))?;
            let canonical = (0..canon.rows).map(|i| row_vec3(&canon.data, i)).collect();
            (Some(TrajectoryCache::new(transforms)?), canonical)
        }
        None => (None, Vec::new()),
    };

    let projector = match meta.get("projector") {
        Some(p) => {
            let mut proj = PromptProjector::new(
                config.latent_dim,
                p["embed_dim"].as_u64().unwrap_or(16) as usize,
                p["hidden"].as_u64().unwrap_or(32) as usize,
                p["vocab_size"].as_u64().unwrap_or(64) as usize,
                p["seed"].as_u64().unwrap_or(config.seed),
            );
            for (slot, name) in [
                (&mut proj.w1, "proj.w1"),
                (&mut proj.b1, "proj.b1"),
                (&mut proj.w2, "proj.w2"),
                (&mut proj.b2, "proj.b2"),
            ] {
                *slot = container
                    .arrays
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing array {name}")))?
                    .clone();
            }
            Some(proj)
        }
        None => None,
    };

    let mut state = ModelState {
        config,
        store,
        adam,
        decoder,
        graph,
        assignment: None,
        cache,
        cache_canonical,
        projector,
        motion_count,
        frame_count,
        step,
        stage,
    };
    if state.stage >= 2 {
        let gaussians = gaussians_from_store(&state.store, 2)?;
        state.assignment = Some(skinning_assignment(&gaussians, &state.keypoints()?, &state.graph)?);
    }
    state.check_integrity()?;
    Ok(state)
}

/// out_dir convention shared by the CLI and tests.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}
