//! Acceptance gate: one pass/fail line per criterion. The end-to-end
//! criteria (4-7, 9) share a single desk-preset training run, so this test
//! takes on the order of the full desk schedule to complete.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use motion4d::diff::{fd_check, ParamStore, Tape, Tensor};
use motion4d::geom::{fps, knn, rbf_weights, trajectory_distance, UnitQuat, Vec3, SE3};
use motion4d::latent::{interpolate_latents, DecoderConfig, MotionDecoder};
use motion4d::loss::{
    arap_edge_weights, arap_loss, arap_loss_vars, chamfer, chamfer_vars, kl_loss, kl_loss_vars,
    photometric_loss_vars, LossWeights,
};
use motion4d::motion::{
    build_motion_graph, lbs_deform, skinning_assignment, GaussianSet, KeyPointSet,
};
use motion4d::render::{Camera, SplatOp};
use motion4d::synthdata::{
    desk_motion_specs, gen_scene, held_out_motion_spec, held_out_prompts, interleaved_rig,
    load_dataset, render_dataset, Dataset, SceneSpec,
};
use motion4d::train::{
    self, decode_trajectory, diversity_proxy, evaluate, keypoint_paths, mask_iou, nearest_family,
    reconstruct_latent, render_frame, sample_motions, trajectory_set_distance, ModelState,
    SampledMotion, TrainConfig,
};

struct Gate {
    results: Vec<(String, Result<String, String>)>,
}

impl Gate {
    fn record(&mut self, label: &str, outcome: Result<String, String>) {
        let verdict = match &outcome {
            Ok(d) => format!("PASS ({d})"),
            Err(d) => format!("FAIL ({d})"),
        };
        // Write straight to stderr so the verdict lines survive the test
        // harness's output capture on passing runs.
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), "{label}: {verdict}");
        self.results.push((label.to_string(), outcome));
    }
}

fn rand_vec3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn check(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("motion4d-accept-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- criterion 1

/// Every loss plus the decoder agrees with central finite differences.
fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut note = |name: &str, err: f64| {
        if err > worst {
            worst = err;
            worst_name = name.to_string();
        }
    };

    // Photometric loss through the rasterizer on a 16x16 render.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = 5;
        let mut store = ParamStore::new();
        let centers: Vec<f64> = (0..n)
            .flat_map(|i| {
                [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), -0.4 + 0.2 * i as f64]
            })
            .collect();
        store.add("centers", n, 3, centers, 1.0);
        store.add("log_scales", n, 3, (0..n * 3).map(|_| rng.gen_range(-2.8..-2.2)).collect(), 1.0);
        store.add("logits", n, 1, (0..n).map(|_| rng.gen_range(-0.5..1.5)).collect(), 1.0);
        store.add("colors", n, 3, (0..n * 3).map(|_| rng.gen_range(0.2..0.9)).collect(), 1.0);
        let t_rgb = Tensor::new(256, 3, (0..256 * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
        let t_mask = Tensor::new(256, 1, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect());
        let cam = Camera::orbit(0.0, 0.0, 2.0, 33.9, (16, 16));
        let w = LossWeights::default();
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let c = tape.leaf(s.get("centers").tensor());
            let ls = tape.leaf(s.get("log_scales").tensor());
            let lo = tape.leaf(s.get("logits").tensor());
            let col = tape.leaf(s.get("colors").tensor());
            let img = tape.custom(Box::new(SplatOp { camera: cam }), &[c, ls, lo, col]);
            let loss = photometric_loss_vars(&mut tape, img, &t_rgb, &t_mask, &w).unwrap();
            (tape, [c, ls, lo, col], loss)
        };
        let (tape, vars, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<_> = vars.iter().map(|v| grads[v.0].clone()).collect();
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        note("photometric", fd_check(&store, &eval, &analytic, 1e-5, 48, 101).max_rel_err);
    }

    // Rigidity loss over three perturbed frames.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let n = 8;
        let positions: Vec<Vec3> = (0..n).map(|_| rand_vec3(&mut rng)).collect();
        let kp = KeyPointSet::new(positions, vec![-0.5; n]).unwrap();
        let graph = build_motion_graph(&kp, None, 3).unwrap();
        let edge_w = arap_edge_weights(&kp, &graph).unwrap();
        let mut store = ParamStore::new();
        for t in 0..3 {
            let data: Vec<f64> = kp
                .positions
                .iter()
                .flat_map(|p| [p.x, p.y, p.z])
                .map(|v| v + rng.gen_range(-0.1..0.1))
                .collect();
            store.add(&format!("f{t}"), n, 3, data, 1.0);
        }
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let frames: Vec<_> =
                (0..3).map(|t| tape.leaf(s.get(&format!("f{t}")).tensor())).collect();
            let loss = arap_loss_vars(&mut tape, &frames, &graph, &edge_w, 1).unwrap();
            (tape, frames, loss)
        };
        let (tape, frames, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<_> = frames.iter().map(|v| grads[v.0].clone()).collect();
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        note("rigidity", fd_check(&store, &eval, &analytic, 1e-6, 48, 103).max_rel_err);
    }

    // Latent prior divergence.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut store = ParamStore::new();
        store.add("mu", 3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1.0);
        store.add("lv", 3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1.0);
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let mu = tape.leaf(s.get("mu").tensor());
            let lv = tape.leaf(s.get("lv").tensor());
            let loss = kl_loss_vars(&mut tape, mu, lv);
            (tape, [mu, lv], loss)
        };
        let (tape, leaves, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<_> = leaves.iter().map(|v| grads[v.0].clone()).collect();
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        note("kl", fd_check(&store, &eval, &analytic, 1e-5, 24, 105).max_rel_err);
    }

    // Chamfer against a fixed target cloud.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let target: Vec<Vec3> = (0..10).map(|_| rand_vec3(&mut rng)).collect();
        let mut store = ParamStore::new();
        store.add("pred", 8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1.0);
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let pred = tape.leaf(s.get("pred").tensor());
            let loss = chamfer_vars(&mut tape, pred, &target).unwrap();
            (tape, pred, loss)
        };
        let (tape, pred, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic = vec![grads[pred.0].clone()];
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        note("chamfer", fd_check(&store, &eval, &analytic, 1e-6, 24, 107).max_rel_err);
    }

    // Trajectory decoder end to end (weights, biases, latent, keypoints).
    {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let cfg =
            DecoderConfig { latent_dim: 4, hidden: 16, depth: 4, skip_layer: 2, pos_freqs: 2, time_freqs: 2 };
        let mut dec = MotionDecoder::new(cfg, &mut rng);
        let last = cfg.depth - 1;
        let (r, c) = (dec.weights[last].rows, dec.weights[last].cols);
        dec.weights[last] = Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-0.2..0.2)).collect());
        let kp: Vec<Vec3> = (0..5).map(|_| rand_vec3(&mut rng)).collect();
        let mut store = ParamStore::new();
        dec.add_to_store(&mut store, 1.0);
        store.add("z", 1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1.0);
        store.add("kp", 5, 3, kp.iter().flat_map(|p| [p.x, p.y, p.z]).collect(), 1.0);
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let params = MotionDecoder::vars_from_store(s, &mut tape, cfg.depth);
            let z = tape.leaf(s.get("z").tensor());
            let pos = tape.leaf(s.get("kp").tensor());
            let mut leaves = Vec::new();
            for l in 0..cfg.depth {
                leaves.push(params.weights[l]);
                leaves.push(params.biases[l]);
            }
            leaves.push(z);
            leaves.push(pos);
            let (quats, trans) = dec.decode_vars(&mut tape, &params, z, pos, 0.4).unwrap();
            let both = tape.concat_cols(&[quats, trans]);
            let sq = tape.square(both);
            let loss = tape.sum_all(sq);
            (tape, leaves, loss)
        };
        let (tape, leaves, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<_> = leaves.iter().map(|v| grads[v.0].clone()).collect();
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        note("decoder", fd_check(&store, &eval, &analytic, 1e-5, 96, 109).max_rel_err);
    }

    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && secs < 120.0,
        format!("max rel err {worst:.2e} ({worst_name}), {secs:.0}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn analytic_invariants() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let n_kp = 10;
    let positions: Vec<Vec3> = (0..n_kp).map(|_| rand_vec3(&mut rng)).collect();
    let kp = KeyPointSet::new(positions.clone(), vec![-1.2; n_kp]).unwrap();
    let graph = build_motion_graph(&kp, None, 4).unwrap();

    // Skinning weights are a partition of unity over each driver set.
    let queries: Vec<Vec3> = (0..40).map(|_| rand_vec3(&mut rng)).collect();
    let neighbor_sets = vec![(0..n_kp).collect::<Vec<_>>(); queries.len()];
    let weights = rbf_weights(&queries, &kp.positions, &kp.radii(), &neighbor_sets)
        .map_err(|e| e.to_string())?;
    for row in &weights {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("skinning row sum {s}"));
        }
    }

    let n_g = 30;
    let gaussians = GaussianSet::new(
        (0..n_g).map(|_| rand_vec3(&mut rng).scale(0.8)).collect(),
        vec![UnitQuat::IDENTITY; n_g],
        vec![Vec3::new(-3.0, -3.0, -3.0); n_g],
        vec![0.5; n_g],
        vec![[0.5; 3]; n_g],
    )
    .unwrap();
    let assignment = skinning_assignment(&gaussians, &kp, &graph).map_err(|e| e.to_string())?;

    // Identity transforms must leave every center untouched.
    let (centers, _) = lbs_deform(&gaussians, &kp, &assignment, &vec![SE3::IDENTITY; n_kp])
        .map_err(|e| e.to_string())?;
    for (c, g) in centers.iter().zip(&gaussians.centers) {
        if c.dist(*g) > 1e-5 {
            return Err(format!("identity drift {}", c.dist(*g)));
        }
    }

    // A shared rigid motion must move every center rigidly (equivariance).
    let rot = UnitQuat::from_axis_angle(Vec3::new(0.3, 1.0, -0.2).normalized(), 0.7);
    let tr = Vec3::new(0.4, -0.1, 0.25);
    let per_kp: Vec<SE3> = kp
        .positions
        .iter()
        .map(|&p| SE3::new(rot, rot.rotate(p).add(tr).sub(p)))
        .collect();
    let (moved, _) = lbs_deform(&gaussians, &kp, &assignment, &per_kp).map_err(|e| e.to_string())?;
    for (m, g) in moved.iter().zip(&gaussians.centers) {
        let expect = rot.rotate(*g).add(tr);
        if m.dist(expect) > 1e-5 {
            return Err(format!("equivariance drift {}", m.dist(expect)));
        }
    }

    // Rigidity energy vanishes under a global rigid trajectory.
    let edge_w = arap_edge_weights(&kp, &graph).map_err(|e| e.to_string())?;
    let frames: Vec<Vec<Vec3>> = (0..5)
        .map(|t| {
            let q = UnitQuat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.3 * t as f64);
            let off = Vec3::new(0.1 * t as f64, -0.05 * t as f64, 0.02 * t as f64);
            kp.positions.iter().map(|&p| q.rotate(p).add(off)).collect()
        })
        .collect();
    let e = arap_loss(&frames, &graph, &edge_w, 1).map_err(|e| e.to_string())?;
    if e.abs() > 1e-6 {
        return Err(format!("rigid motion energy {e}"));
    }

    // Prior divergence: exactly zero at the prior, nonnegative everywhere.
    if kl_loss(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]) != 0.0 {
        return Err("kl not exactly zero at the prior".into());
    }
    for _ in 0..10_000 {
        let mu = [rng.gen_range(-3.0..3.0)];
        let lv = [rng.gen_range(-4.0..2.0)];
        if kl_loss(&mu, &lv) < -1e-12 {
            return Err(format!("negative kl at mu {} lv {}", mu[0], lv[0]));
        }
    }

    // Chamfer self-distance is exactly zero.
    let cloud: Vec<Vec3> = (0..20).map(|_| rand_vec3(&mut rng)).collect();
    if chamfer(&cloud, &cloud).map_err(|e| e.to_string())? != 0.0 {
        return Err("chamfer(A, A) != 0".into());
    }

    Ok("skinning, lbs, rigidity, kl, chamfer".into())
}

// ---------------------------------------------------------------- criterion 3

fn oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let points: Vec<Vec3> = (0..64).map(|_| rand_vec3(&mut rng)).collect();

    // KNN against an exhaustive sort per query.
    let got = knn(&points, 5).map_err(|e| e.to_string())?;
    for i in 0..points.len() {
        let mut cand: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| {
            points[i]
                .dist_sq(points[a])
                .partial_cmp(&points[i].dist_sq(points[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        cand.truncate(5);
        if got[i] != cand {
            return Err(format!("knn mismatch at {i}"));
        }
    }

    // FPS against a literal greedy max-min scan.
    let got = fps(&points, 12, 3).map_err(|e| e.to_string())?;
    let mut picked = vec![3usize];
    while picked.len() < 12 {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..points.len() {
            if picked.contains(&j) {
                continue;
            }
            let d = picked.iter().map(|&s| points[j].dist_sq(points[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, j);
            }
        }
        picked.push(best.1);
    }
    if got != picked {
        return Err("fps mismatch".into());
    }

    // Chamfer against a double loop.
    let a: Vec<Vec3> = (0..48).map(|_| rand_vec3(&mut rng)).collect();
    let b: Vec<Vec3> = (0..64).map(|_| rand_vec3(&mut rng)).collect();
    let got = chamfer(&a, &b).map_err(|e| e.to_string())?;
    let nearest = |src: &[Vec3], dst: &[Vec3]| -> f64 {
        src.iter()
            .map(|p| dst.iter().map(|q| p.dist_sq(*q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / src.len() as f64
    };
    if got != nearest(&a, &b) + nearest(&b, &a) {
        return Err("chamfer mismatch".into());
    }

    // Trajectory distance against its closed form.
    let ta: Vec<Vec3> = (0..16).map(|_| rand_vec3(&mut rng)).collect();
    let tb: Vec<Vec3> = (0..16).map(|_| rand_vec3(&mut rng)).collect();
    let expect = ta.iter().zip(&tb).map(|(p, q)| p.dist_sq(*q)).sum::<f64>().sqrt() / 16.0;
    if trajectory_distance(&ta, &tb).map_err(|e| e.to_string())? != expect {
        return Err("trajectory distance mismatch".into());
    }

    // Diversity proxy against a literal pairwise mean.
    let sets: Vec<Vec<Vec<Vec3>>> = (0..5)
        .map(|_| (0..6).map(|_| (0..8).map(|_| rand_vec3(&mut rng)).collect()).collect())
        .collect();
    let got = diversity_proxy(&sets).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            acc += trajectory_set_distance(&sets[i], &sets[j]).map_err(|e| e.to_string())?;
            pairs += 1;
        }
    }
    if got != acc / pairs as f64 {
        return Err("diversity proxy mismatch".into());
    }

    // KL against a Monte Carlo estimate of E_q[log q - log p].
    let mu = [0.8, -1.3];
    let log_var = [0.6, -0.9];
    let analytic = kl_loss(&mu, &log_var);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for d in 0..2 {
            let std = (0.5 * log_var[d]).exp();
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu[d] + std * e;
            let log_q = -0.5 * (e * e) - 0.5 * log_var[d];
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    let mc = acc / n as f64;
    let rel = (mc - analytic).abs() / analytic.abs();
    check(rel < 0.02, format!("kernels exact, kl mc rel err {rel:.4}"))
}

// ------------------------------------------------------------ criteria 4..9

/// Renders the desk corpus (plus the unseen clip) and trains the full desk
/// schedule once; criteria 4-7 and 9 all read this state.
fn train_desk() -> Result<(ModelState, Dataset, Dataset, f64), String> {
    let dir = tmp_dir("desk");
    let spec = SceneSpec::desk_chain();
    let scene = gen_scene(&spec, 0).map_err(|e| e.to_string())?;
    let cameras = interleaved_rig(6, 3, (64, 64)).map_err(|e| e.to_string())?;
    let motions = desk_motion_specs(scene.joints.len(), 20);
    render_dataset(&scene, &motions, &cameras, 3, &dir.join("data"), 0).map_err(|e| e.to_string())?;
    let dataset = load_dataset(&dir.join("data")).map_err(|e| e.to_string())?;
    let unseen = held_out_motion_spec(scene.joints.len(), 20);
    let clip = render_dataset(&scene, &[unseen], &cameras, 3, &dir.join("held"), 0)
        .map_err(|e| e.to_string())?;

    let start = Instant::now();
    let config = TrainConfig::desk();
    let state = train::train(&dataset, &config, &dir.join("run")).map_err(|e| e.to_string())?;
    Ok((state, dataset, clip, start.elapsed().as_secs_f64()))
}

fn desk_reconstruction(state: &ModelState, dataset: &Dataset, train_secs: f64) -> Result<String, String> {
    let report = evaluate(state, dataset).map_err(|e| e.to_string())?;
    let detail = format!(
        "iou {:.3}, traj rmse {:.2}% of bbox, train {:.0}s",
        report.mean_iou,
        100.0 * report.rmse_fraction,
        train_secs
    );
    check(
        report.mean_iou > 0.85 && report.rmse_fraction < 0.05 && train_secs < 45.0 * 60.0,
        detail,
    )
}

fn clip_iou(state: &ModelState, clip: &Dataset, z: &[f64]) -> Result<f64, String> {
    let views: Vec<usize> = if clip.train_views < clip.view_count {
        (clip.train_views..clip.view_count).collect()
    } else {
        (0..clip.view_count).collect()
    };
    let transforms = decode_trajectory(state, z, &clip.timestamps).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    let mut n = 0;
    for t in 0..clip.frame_count {
        for &v in &views {
            let out = render_frame(state, &transforms[t], &clip.cameras[v]).map_err(|e| e.to_string())?;
            acc += mask_iou(&out.alpha, &clip.masks[clip.frame_index(0, v, t)]);
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

fn unseen_clip_fit(state: &ModelState, clip: &Dataset) -> Result<String, String> {
    let z = reconstruct_latent(state, clip, 300).map_err(|e| e.to_string())?;
    let iou = clip_iou(state, clip, &z)?;
    check(iou > 0.8, format!("latent-only fit in 300 steps, iou {iou:.3}"))
}

fn feed_forward_sampling(state: &ModelState) -> Result<String, String> {
    // Zero optimization steps by construction: sampling only reads the state.
    let _: fn(&ModelState, usize, usize, u64) -> motion4d::Result<Vec<SampledMotion>> =
        sample_motions;
    let start = Instant::now();
    let samples = sample_motions(state, 16, state.frame_count, 7).map_err(|e| e.to_string())?;
    let cam = Camera::orbit(0.0, 20.0, 2.2, 40.0, (64, 64));
    for s in &samples {
        render_frame(state, &s.transforms[0], &cam).map_err(|e| e.to_string())?;
    }
    let per_motion = start.elapsed().as_secs_f64() / 16.0;
    let sets: Vec<_> = samples.iter().map(|s| s.paths.clone()).collect();
    let diversity = diversity_proxy(&sets).map_err(|e| e.to_string())?;
    check(
        per_motion <= 5.0 && diversity > 0.0,
        format!("{per_motion:.2}s/motion, diversity {diversity:.4}"),
    )
}

fn interpolation_continuity(state: &ModelState) -> Result<String, String> {
    // Two same-family training motions (the slow/fast twist pair): the latent
    // line between them stays inside the twist mode, so intermediate steps
    // should morph speed, not jump between motion families.
    let (ma, mb) = (4usize, 5usize);
    let mu_a = state.latent_mu(ma);
    let mu_b = state.latent_mu(mb);
    let keypoints = state.keypoints().map_err(|e| e.to_string())?;
    let timestamps: Vec<f64> =
        (0..state.frame_count).map(|t| t as f64 / (state.frame_count - 1) as f64).collect();

    let mut paths = Vec::new();
    for i in 0..=10 {
        let z = interpolate_latents(&mu_a, &mu_b, i as f64 / 10.0).map_err(|e| e.to_string())?;
        let tf = decode_trajectory(state, &z, &timestamps).map_err(|e| e.to_string())?;
        paths.push(keypoint_paths(&keypoints, &tf));
    }
    let max_gap = |a: &Vec<Vec<Vec3>>, b: &Vec<Vec<Vec3>>| -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| x.dist(*y)))
            .fold(0.0, f64::max)
    };
    let endpoint = max_gap(&paths[0], &paths[10]);
    let mut worst_step: f64 = 0.0;
    for w in paths.windows(2) {
        worst_step = worst_step.max(max_gap(&w[0], &w[1]));
    }
    if worst_step > 0.2 * endpoint {
        return Err(format!(
            "step displacement {worst_step:.4} vs 20% of endpoint gap {endpoint:.4}"
        ));
    }

    // The interpolation endpoints must reproduce the training motions' own
    // renders exactly, bit for bit.
    let cam = Camera::orbit(120.0, 20.0, 2.2, 40.0, (64, 64));
    for (alpha, mu) in [(0.0f64, &mu_a), (1.0, &mu_b)] {
        let z = interpolate_latents(&mu_a, &mu_b, alpha).map_err(|e| e.to_string())?;
        let tf_i = decode_trajectory(state, &z, &timestamps).map_err(|e| e.to_string())?;
        let tf_m = decode_trajectory(state, mu, &timestamps).map_err(|e| e.to_string())?;
        for t in [0, state.frame_count / 2] {
            let a = render_frame(state, &tf_i[t], &cam).map_err(|e| e.to_string())?;
            let b = render_frame(state, &tf_m[t], &cam).map_err(|e| e.to_string())?;
            let same = a.rgb.iter().zip(&b.rgb).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.alpha.iter().zip(&b.alpha).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("endpoint render differs at alpha {alpha} frame {t}"));
            }
        }
    }
    Ok(format!("max step {:.1}% of endpoint gap, endpoints bitwise", 100.0 * worst_step / endpoint))
}

fn determinism() -> Result<String, String> {
    let run = |tag: &str| -> Result<(Vec<u8>, String), String> {
        let dir = tmp_dir(tag);
        let spec = SceneSpec::desk_chain();
        let scene = gen_scene(&spec, 11).map_err(|e| e.to_string())?;
        let cameras = interleaved_rig(4, 2, (16, 16)).map_err(|e| e.to_string())?;
        let motions = desk_motion_specs(scene.joints.len(), 8);
        render_dataset(&scene, &motions[..3], &cameras, 2, &dir.join("data"), 11)
            .map_err(|e| e.to_string())?;
        let dataset = load_dataset(&dir.join("data")).map_err(|e| e.to_string())?;

        let mut config = TrainConfig::desk();
        config.stage1_steps = 60;
        config.stage2_steps = 60;
        config.keypoints = 12;
        config.gaussians_per_keypoint = 8;
        config.stage1_resolution = 16;
        config.stage2_resolutions = vec![16];
        config.densify_interval = 25;
        config.anneal_interval = 50;
        config.checkpoint_interval = 1000;
        config.seed = 11;
        let state = train::train(&dataset, &config, &dir.join("run")).map_err(|e| e.to_string())?;

        let ckpt = std::fs::read(dir.join("run").join("checkpoint.ckpt")).map_err(|e| e.to_string())?;
        let report = evaluate(&state, &dataset).map_err(|e| e.to_string())?;
        let metrics = serde_json::to_string(&report).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok((ckpt, metrics))
    };
    let (ckpt_a, metrics_a) = run("det-a")?;
    let (ckpt_b, metrics_b) = run("det-b")?;
    check(
        ckpt_a == ckpt_b && metrics_a == metrics_b,
        format!("2 runs, checkpoint {} bytes, metrics {} bytes", ckpt_a.len(), metrics_a.len()),
    )
}

fn prompt_selection(state: &ModelState, dataset: &Dataset) -> Result<String, String> {
    let proj = state.projector.as_ref().ok_or("no projector in trained state")?;
    let prompts = held_out_prompts();
    let mut hits = 0;
    for (tokens, family) in &prompts {
        let z = proj.project(tokens).map_err(|e| e.to_string())?;
        if &nearest_family(state, &z, &dataset.families).map_err(|e| e.to_string())? == family {
            hits += 1;
        }
    }
    check(hits * 10 >= prompts.len() * 8, format!("{hits}/{} prompt families correct", prompts.len()))
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { results: Vec::new() };

    gate.record("criterion 1 gradient correctness", gradient_correctness());
    gate.record("criterion 2 analytic invariants", analytic_invariants());
    gate.record("criterion 3 oracle equivalence", oracle_equivalence());

    match train_desk() {
        Ok((state, dataset, clip, train_secs)) => {
            gate.record(
                "criterion 4 end-to-end desk reconstruction",
                desk_reconstruction(&state, &dataset, train_secs),
            );
            gate.record("criterion 5 unseen clip latent fit", unseen_clip_fit(&state, &clip));
            gate.record("criterion 6 feed-forward sampling", feed_forward_sampling(&state));
            gate.record("criterion 7 interpolation continuity", interpolation_continuity(&state));
            gate.record("criterion 8 determinism", determinism());
            gate.record("criterion 9 prompt selection", prompt_selection(&state, &dataset));
        }
        Err(e) => {
            for label in [
                "criterion 4 end-to-end desk reconstruction",
                "criterion 5 unseen clip latent fit",
                "criterion 6 feed-forward sampling",
                "criterion 7 interpolation continuity",
                "criterion 8 determinism",
                "criterion 9 prompt selection",
            ] {
                gate.record(label, Err(format!("desk training failed: {e}")));
            }
        }
    }

    let failures: Vec<_> = gate
        .results
        .iter()
        .filter_map(|(label, r)| r.as_ref().err().map(|e| format!("{label}: {e}")))
        .collect();
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
